//! C ABI for the mdgps library.
//!
//! Policies load into opaque handles; every call returns a status code and
//! the last failure's message is retrievable per thread. Pointers passed
//! in must be valid for the stated lengths; handles must come from this
//! library and be freed exactly once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mdgps::error::MdgpsError;
use mdgps::harness::{cmd_eval, cmd_train, EvalOptions, TrainOptions};
use mdgps::policy::{load_checkpoint, GlobalPolicy};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdgpsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    /// Checkpoint or log format version not supported.
    Version = 5,
    Dimension = 6,
    /// Numerical failure inside the library.
    Numeric = 7,
    RunFailed = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &MdgpsError) -> MdgpsStatus {
    match err {
        MdgpsError::Io(_) => MdgpsStatus::Io,
        MdgpsError::Json(_) | MdgpsError::Config(_) | MdgpsError::RunLog(_) => MdgpsStatus::Parse,
        MdgpsError::CheckpointVersion { .. } => MdgpsStatus::Version,
        MdgpsError::Dimension { .. } => MdgpsStatus::Dimension,
        MdgpsError::NotPositiveDefinite { .. }
        | MdgpsError::NonFinite(_)
        | MdgpsError::DivergentRecursion { .. }
        | MdgpsError::DualSearch(_)
        | MdgpsError::SStep(_) => MdgpsStatus::Numeric,
        _ => MdgpsStatus::RunFailed,
    }
}

fn report(err: MdgpsError) -> MdgpsStatus {
    let status = status_for(&err);
    set_error(&err.to_string());
    status
}

fn guarded(body: impl FnOnce() -> MdgpsStatus) -> MdgpsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic crossed the FFI boundary");
            MdgpsStatus::Panic
        }
    }
}

unsafe fn cstr_arg(ptr: *const c_char, name: &str) -> Result<String, MdgpsStatus> {
    if ptr.is_null() {
        set_error(&format!("argument '{name}' is null"));
        return Err(MdgpsStatus::NullArgument);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(s.to_owned()),
        Err(_) => {
            set_error(&format!("argument '{name}' is not valid UTF-8"));
            Err(MdgpsStatus::InvalidUtf8)
        }
    }
}

/// Opaque policy handle.
pub struct MdgpsPolicy {
    inner: GlobalPolicy,
}

/// Load a policy checkpoint into a fresh handle. On success `*out` owns
/// the handle; free it with `mdgps_policy_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mdgps_policy_load(
    path: *const c_char,
    out: *mut *mut MdgpsPolicy,
) -> MdgpsStatus {
    guarded(|| {
        if out.is_null() {
            set_error("argument 'out' is null");
            return MdgpsStatus::NullArgument;
        }
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_checkpoint(std::path::Path::new(&path)) {
            Ok(policy) => {
                *out = Box::into_raw(Box::new(MdgpsPolicy { inner: policy }));
                MdgpsStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Release a handle returned by `mdgps_policy_load`.
///
/// # Safety
/// `policy` must be a handle from this library, not yet freed; null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn mdgps_policy_free(policy: *mut MdgpsPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// State dimension the policy expects (zero for a null handle).
///
/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mdgps_policy_state_dim(policy: *const MdgpsPolicy) -> usize {
    if policy.is_null() {
        0
    } else {
        (*policy).inner.state_dim()
    }
}

/// Action dimension the policy produces (zero for a null handle).
///
/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mdgps_policy_action_dim(policy: *const MdgpsPolicy) -> usize {
    if policy.is_null() {
        0
    } else {
        (*policy).inner.action_dim()
    }
}

/// Deterministic policy mean at a state. `state` holds `state_len`
/// doubles, `action_out` receives `action_len` doubles.
///
/// # Safety
/// `policy` must be a live handle; the buffers must be valid for the
/// stated lengths.
#[no_mangle]
pub unsafe extern "C" fn mdgps_policy_mean(
    policy: *const MdgpsPolicy,
    state: *const f64,
    state_len: usize,
    action_out: *mut f64,
    action_len: usize,
) -> MdgpsStatus {
    guarded(|| {
        if policy.is_null() || state.is_null() || action_out.is_null() {
            set_error("null argument to mdgps_policy_mean");
            return MdgpsStatus::NullArgument;
        }
        let handle = &(*policy).inner;
        if action_len != handle.action_dim() {
            set_error(&format!(
                "action buffer holds {action_len} values, policy produces {}",
                handle.action_dim()
            ));
            return MdgpsStatus::Dimension;
        }
        let state = std::slice::from_raw_parts(state, state_len);
        let x = nalgebra::DVector::from_column_slice(state);
        match handle.mean(&x) {
            Ok(mean) => {
                let out = std::slice::from_raw_parts_mut(action_out, action_len);
                out.copy_from_slice(mean.as_slice());
                MdgpsStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Row-major action covariance; `cov_out` must hold
/// `action_dim * action_dim` doubles.
///
/// # Safety
/// `policy` must be a live handle and `cov_out` valid for `cov_len`.
#[no_mangle]
pub unsafe extern "C" fn mdgps_policy_covariance(
    policy: *const MdgpsPolicy,
    cov_out: *mut f64,
    cov_len: usize,
) -> MdgpsStatus {
    guarded(|| {
        if policy.is_null() || cov_out.is_null() {
            set_error("null argument to mdgps_policy_covariance");
            return MdgpsStatus::NullArgument;
        }
        let handle = &(*policy).inner;
        let du = handle.action_dim();
        if cov_len != du * du {
            set_error(&format!("covariance buffer holds {cov_len} values, need {}", du * du));
            return MdgpsStatus::Dimension;
        }
        let cov = handle.covariance();
        let out = std::slice::from_raw_parts_mut(cov_out, cov_len);
        for r in 0..du {
            for c in 0..du {
                out[r * du + c] = cov[(r, c)];
            }
        }
        MdgpsStatus::Ok
    })
}

/// Run a full training experiment from a config file. `output_dir` may be
/// null to use the config's own output directory; `seed` below zero keeps
/// the config's seed.
///
/// # Safety
/// Strings must be valid NUL-terminated pointers (or null where allowed).
#[no_mangle]
pub unsafe extern "C" fn mdgps_train_run(
    config_path: *const c_char,
    output_dir: *const c_char,
    seed: i64,
) -> MdgpsStatus {
    guarded(|| {
        let config_path = match cstr_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let output = if output_dir.is_null() {
            None
        } else {
            match cstr_arg(output_dir, "output_dir") {
                Ok(p) => Some(PathBuf::from(p)),
                Err(status) => return status,
            }
        };
        let options = TrainOptions {
            config_path: PathBuf::from(config_path),
            seed: if seed < 0 { None } else { Some(seed as u64) },
            output,
            ..Default::default()
        };
        match cmd_train(&options) {
            Ok(_) => MdgpsStatus::Ok,
            Err(err) => report(err),
        }
    })
}

/// Evaluate a checkpoint on an environment; writes the summary statistics
/// through the out-pointers (each may be null to skip).
///
/// # Safety
/// Strings must be valid; out-pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn mdgps_eval_run(
    checkpoint: *const c_char,
    env: *const c_char,
    n_rollouts: usize,
    seed: u64,
    mean_return: *mut f64,
    success_rate: *mut f64,
    mean_final_distance: *mut f64,
) -> MdgpsStatus {
    guarded(|| {
        let checkpoint = match cstr_arg(checkpoint, "checkpoint") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let env = match cstr_arg(env, "env") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let options = EvalOptions {
            checkpoint: PathBuf::from(checkpoint),
            env,
            n_rollouts,
            seed,
            output: None,
            horizon: None,
            conditions: None,
        };
        match cmd_eval(&options) {
            Ok(summary) => {
                if !mean_return.is_null() {
                    *mean_return = summary.mean_return;
                }
                if !success_rate.is_null() {
                    *success_rate = summary.success_rate;
                }
                if !mean_final_distance.is_null() {
                    *mean_final_distance = summary.mean_final_distance;
                }
                MdgpsStatus::Ok
            }
            Err(err) => report(err),
        }
    })
}

/// Copy the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated) and return the full message length.
///
/// # Safety
/// `buf` must be valid for `len` bytes, or null to query the length.
#[no_mangle]
pub unsafe extern "C" fn mdgps_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mdgps_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}
