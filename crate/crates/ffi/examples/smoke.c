/* Minimal C consumer of the mdgps C ABI: load a checkpoint, query the
 * policy, evaluate it on an environment.
 *
 * Build (from the repository root):
 *   cargo build -p mdgps-ffi
 *   cc crates/ffi/examples/smoke.c -Icrates/ffi/include \
 *      -Ltarget/debug -lmdgps_ffi -lm -o smoke
 *   LD_LIBRARY_PATH=target/debug ./smoke <checkpoint.json> <env>
 */
#include <stdio.h>
#include <stdlib.h>

#include "mdgps.h"

static void die(const char *what) {
    char msg[512];
    mdgps_last_error_message(msg, sizeof msg);
    fprintf(stderr, "%s failed: %s\n", what, msg);
    exit(1);
}

int main(int argc, char **argv) {
    if (argc < 3) {
        fprintf(stderr, "usage: %s <checkpoint.json> <env>\n", argv[0]);
        return 2;
    }
    printf("mdgps %s\n", mdgps_version());

    MdgpsPolicy *policy = NULL;
    if (mdgps_policy_load(argv[1], &policy) != MDGPS_STATUS_OK) {
        die("mdgps_policy_load");
    }
    size_t dx = mdgps_policy_state_dim(policy);
    size_t du = mdgps_policy_action_dim(policy);
    printf("policy: %zu states -> %zu actions\n", dx, du);

    double *state = calloc(dx, sizeof(double));
    double *action = calloc(du, sizeof(double));
    if (mdgps_policy_mean(policy, state, dx, action, du) != MDGPS_STATUS_OK) {
        die("mdgps_policy_mean");
    }
    printf("mean action at the origin: [");
    for (size_t i = 0; i < du; i++) {
        printf("%s%.6f", i ? ", " : "", action[i]);
    }
    printf("]\n");

    double mean_return, success_rate, mean_distance;
    if (mdgps_eval_run(argv[1], argv[2], 5, 0, &mean_return, &success_rate,
                       &mean_distance) != MDGPS_STATUS_OK) {
        die("mdgps_eval_run");
    }
    printf("eval: mean return %.4f, success rate %.3f, mean distance %.4f\n",
           mean_return, success_rate, mean_distance);

    free(state);
    free(action);
    mdgps_policy_free(policy);
    return 0;
}
