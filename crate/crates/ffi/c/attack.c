/* Runs one method against every target of a config and prints the
 * estimated gains.
 *
 *   cc -Icrates/ffi/include crates/ffi/c/attack.c \
 *      -Ltarget/release -lpoisonbench_ffi -o attack
 *   LD_LIBRARY_PATH=target/release ./attack configs/reference.conf effective
 */
#include <stdio.h>

#include "poisonbench.h"

static int check(PbStatus s, const char *what) {
    if (s != PB_STATUS_OK) {
        const char *msg = pb_last_error();
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, msg ? msg : "");
        return 1;
    }
    return 0;
}

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: %s <config> <method>\n", argv[0]);
        return 2;
    }
    PbConfig *cfg = NULL;
    PbWorkspace *ws = NULL;
    PbModels *models = NULL;
    PbEngine *engine = NULL;
    int rc = 3;

    if (check(pb_config_from_file(argv[1], &cfg), "config")) {
        return 2;
    }
    if (check(pb_workspace_load(cfg, &ws), "workspace") ||
        check(pb_models_fit(ws, &models), "train") ||
        check(pb_engine_new(ws, models, &engine), "engine")) {
        goto done;
    }
    size_t n = 0;
    pb_workspace_target_count(ws, &n);
    for (size_t i = 0; i < n; i++) {
        PbAttack *a = NULL;
        if (check(pb_attack_run(ws, engine, argv[2], i, &a), "attack")) {
            goto done;
        }
        double gain = 0.0, spent = 0.0;
        size_t len = 0;
        pb_attack_gain(a, &gain);
        pb_attack_spent(a, &spent);
        pb_attack_len(a, &len);
        char *id = pb_workspace_target_id(ws, i);
        printf("%s\t%zu edits\tspent %.2f\tgain %+.4f\n", id, len, spent, gain);
        pb_string_free(id);
        pb_attack_free(a);
    }
    rc = 0;
done:
    pb_engine_free(engine);
    pb_models_free(models);
    pb_workspace_free(ws);
    pb_config_free(cfg);
    return rc;
}
