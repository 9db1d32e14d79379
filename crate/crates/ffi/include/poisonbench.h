#ifndef POISONBENCH_H
#define POISONBENCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by all fallible calls.
typedef enum PbStatus {
  PB_STATUS_OK = 0,
  PB_STATUS_NULL_ARGUMENT = 1,
  PB_STATUS_INVALID_UTF8 = 2,
  PB_STATUS_CONFIG = 3,
  PB_STATUS_IO = 4,
  PB_STATUS_MISSING_ARTIFACT = 5,
  PB_STATUS_OUT_OF_RANGE = 6,
  PB_STATUS_RUNTIME = 7,
  PB_STATUS_PANIC = 8,
} PbStatus;

// Outcome of one attack method on one target.
typedef struct PbAttack PbAttack;

// Parsed experiment configuration.
typedef struct PbConfig PbConfig;

// Influence estimator around the offline ensemble.
typedef struct PbEngine PbEngine;

// Offline ensemble and online model.
typedef struct PbModels PbModels;

// Corpus, embeddings, dataset and target list built from a configuration.
typedef struct PbWorkspace PbWorkspace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pb_version(void);

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next `pb_*` call on the same thread.
const char *pb_last_error(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must be NULL or a pointer returned by a `pb_*` call documented as
// returning an owned string, not yet freed.
void pb_string_free(char *s);

// Reads a `key = value` config file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PbStatus pb_config_from_file(const char *path, struct PbConfig **out);

// Parses config text in the file format.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a writable pointer.
enum PbStatus pb_config_from_text(const char *text, struct PbConfig **out);

// Sets one key, as a CLI override would. The config is left unchanged when
// the new value fails validation.
//
// # Safety
// `cfg` must come from `pb_config_from_*`; `key` and `value` must be
// NUL-terminated strings.
enum PbStatus pb_config_set(struct PbConfig *cfg, const char *key, const char *value);

// Renders the config in the file format. Owned string; free with
// `pb_string_free`. Returns NULL on failure.
//
// # Safety
// `cfg` must come from `pb_config_from_*`.
char *pb_config_to_text(const struct PbConfig *cfg);

// # Safety
// `cfg` must be NULL or come from `pb_config_from_*`, not yet freed.
void pb_config_free(struct PbConfig *cfg);

// Builds the corpus, embedding table, dataset and targets.
//
// # Safety
// `cfg` must come from `pb_config_from_*` and `out` be writable.
enum PbStatus pb_workspace_load(const struct PbConfig *cfg, struct PbWorkspace **out);

// Number of attack targets.
//
// # Safety
// `ws` must come from `pb_workspace_load` and `out` be writable.
enum PbStatus pb_workspace_target_count(const struct PbWorkspace *ws, size_t *out);

// News id of target `index`. Owned string; free with `pb_string_free`.
// Returns NULL when `index` is out of range.
//
// # Safety
// `ws` must come from `pb_workspace_load`.
char *pb_workspace_target_id(const struct PbWorkspace *ws, size_t index);

// # Safety
// `ws` must be NULL or come from `pb_workspace_load`, not yet freed.
void pb_workspace_free(struct PbWorkspace *ws);

// Trains the offline ensemble and the online model in memory.
//
// # Safety
// `ws` must come from `pb_workspace_load` and `out` be writable.
enum PbStatus pb_models_fit(const struct PbWorkspace *ws, struct PbModels **out);

// Reads models written by the `train` command under the configured output.
//
// # Safety
// `ws` must come from `pb_workspace_load` and `out` be writable.
enum PbStatus pb_models_load(const struct PbWorkspace *ws, struct PbModels **out);

// # Safety
// `models` must be NULL or come from `pb_models_*`, not yet freed.
void pb_models_free(struct PbModels *models);

// Factorizes the offline ensemble's Hessians for influence estimates.
//
// # Safety
// `ws` and `models` must be live handles and `out` writable.
enum PbStatus pb_engine_new(const struct PbWorkspace *ws,
                            const struct PbModels *models,
                            struct PbEngine **out);

// Offline MRR of target `index` before any edit.
//
// # Safety
// `ws` and `engine` must be live handles built from the same workspace and
// `out` writable.
enum PbStatus pb_engine_clean_mrr(const struct PbWorkspace *ws,
                                  const struct PbEngine *engine,
                                  size_t index,
                                  double *out);

// # Safety
// `engine` must be NULL or come from `pb_engine_new`, not yet freed.
void pb_engine_free(struct PbEngine *engine);

// Runs `method` ("none", "random", "effective" or "tdp-cp") against
// target `index` with the workspace's environment and agent settings.
//
// # Safety
// `ws` and `engine` must be live handles built from the same workspace,
// `method` a NUL-terminated string and `out` writable.
enum PbStatus pb_attack_run(const struct PbWorkspace *ws,
                            const struct PbEngine *engine,
                            const char *method,
                            size_t index,
                            struct PbAttack **out);

// Estimated MRR gain of the attack at the time it was run.
//
// # Safety
// `attack` must come from `pb_attack_run` and `out` be writable.
enum PbStatus pb_attack_gain(const struct PbAttack *attack, double *out);

// Risk budget consumed.
//
// # Safety
// `attack` must come from `pb_attack_run` and `out` be writable.
enum PbStatus pb_attack_spent(const struct PbAttack *attack, double *out);

// Number of word replacements.
//
// # Safety
// `attack` must come from `pb_attack_run` and `out` be writable.
enum PbStatus pb_attack_len(const struct PbAttack *attack, size_t *out);

// The replacements as tab-separated `news, old, new, cost` lines, the
// `.seq` file format. Owned string; free with `pb_string_free`.
//
// # Safety
// `attack` must come from `pb_attack_run`.
char *pb_attack_sequence(const struct PbAttack *attack);

// # Safety
// `attack` must be NULL or come from `pb_attack_run`, not yet freed.
void pb_attack_free(struct PbAttack *attack);

// Influence estimate of the MRR gain of a sequence in `.seq` format
// against target `index`.
//
// # Safety
// `ws` and `engine` must be live handles built from the same workspace,
// `sequence` a NUL-terminated string and `out` writable.
enum PbStatus pb_estimate_gain(const struct PbWorkspace *ws,
                               const struct PbEngine *engine,
                               size_t index,
                               const char *sequence,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POISONBENCH_H */
