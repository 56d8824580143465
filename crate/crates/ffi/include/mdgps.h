#ifndef MDGPS_H
#define MDGPS_H

/* Generated by cbindgen from the mdgps-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  MDGPS_STATUS_OK = 0,
  MDGPS_STATUS_NULL_ARGUMENT = 1,
  MDGPS_STATUS_INVALID_UTF8 = 2,
  MDGPS_STATUS_IO = 3,
  MDGPS_STATUS_PARSE = 4,
  /**
   * Checkpoint or log format version not supported.
   */
  MDGPS_STATUS_VERSION = 5,
  MDGPS_STATUS_DIMENSION = 6,
  /**
   * Numerical failure inside the library.
   */
  MDGPS_STATUS_NUMERIC = 7,
  MDGPS_STATUS_RUN_FAILED = 8,
  MDGPS_STATUS_PANIC = 9,
} MdgpsStatus;

/**
 * Opaque policy handle.
 */
typedef struct MdgpsPolicy MdgpsPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a policy checkpoint into a fresh handle. On success `*out` owns
 * the handle; free it with `mdgps_policy_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
MdgpsStatus mdgps_policy_load(const char *path, MdgpsPolicy **out);

/**
 * Release a handle returned by `mdgps_policy_load`.
 *
 * # Safety
 * `policy` must be a handle from this library, not yet freed; null is a
 * no-op.
 */
void mdgps_policy_free(MdgpsPolicy *policy);

/**
 * State dimension the policy expects (zero for a null handle).
 *
 * # Safety
 * `policy` must be a live handle or null.
 */
size_t mdgps_policy_state_dim(const MdgpsPolicy *policy);

/**
 * Action dimension the policy produces (zero for a null handle).
 *
 * # Safety
 * `policy` must be a live handle or null.
 */
size_t mdgps_policy_action_dim(const MdgpsPolicy *policy);

/**
 * Deterministic policy mean at a state. `state` holds `state_len`
 * doubles, `action_out` receives `action_len` doubles.
 *
 * # Safety
 * `policy` must be a live handle; the buffers must be valid for the
 * stated lengths.
 */
MdgpsStatus mdgps_policy_mean(const MdgpsPolicy *policy,
                              const double *state,
                              size_t state_len,
                              double *action_out,
                              size_t action_len);

/**
 * Row-major action covariance; `cov_out` must hold
 * `action_dim * action_dim` doubles.
 *
 * # Safety
 * `policy` must be a live handle and `cov_out` valid for `cov_len`.
 */
MdgpsStatus mdgps_policy_covariance(const MdgpsPolicy *policy, double *cov_out, size_t cov_len);

/**
 * Run a full training experiment from a config file. `output_dir` may be
 * null to use the config's own output directory; `seed` below zero keeps
 * the config's seed.
 *
 * # Safety
 * Strings must be valid NUL-terminated pointers (or null where allowed).
 */
MdgpsStatus mdgps_train_run(const char *config_path, const char *output_dir, int64_t seed);

/**
 * Evaluate a checkpoint on an environment; writes the summary statistics
 * through the out-pointers (each may be null to skip).
 *
 * # Safety
 * Strings must be valid; out-pointers must be valid or null.
 */
MdgpsStatus mdgps_eval_run(const char *checkpoint,
                           const char *env,
                           size_t n_rollouts,
                           uint64_t seed,
                           double *mean_return,
                           double *success_rate,
                           double *mean_final_distance);

/**
 * Copy the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated) and return the full message length.
 *
 * # Safety
 * `buf` must be valid for `len` bytes, or null to query the length.
 */
size_t mdgps_last_error_message(char *buf, size_t len);

/**
 * Library version as a static string.
 */
const char *mdgps_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MDGPS_H */
