/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef STRUCTCORR_H
#define STRUCTCORR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ScStatus {
  SC_STATUS_OK = 0,
  SC_STATUS_INVALID_ARGUMENT = 1,
  SC_STATUS_SCHEMA = 2,
  SC_STATUS_MISSING_ARTIFACT = 3,
  SC_STATUS_NUMERICAL = 4,
  SC_STATUS_NULL_POINTER = 5,
  SC_STATUS_IO = 6,
  SC_STATUS_PANIC = 7,
} ScStatus;

/**
 * Which hand-wired oracle to build.
 */
typedef enum ScOracleKind {
  SC_ORACLE_KIND_WORLD = 0,
  SC_ORACLE_KIND_COOCCURRENCE = 1,
} ScOracleKind;

typedef struct ScCorpus ScCorpus;

typedef struct ScModel ScModel;

typedef struct ScWorld ScWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Free with
 * `sc_free_string`.
 */
char *sc_last_error_message(void);

/**
 * Release a string returned by this library. Null is ignored.
 */
void sc_free_string(char *s);

/**
 * Library version, statically allocated.
 */
const char *sc_version(void);

/**
 * Generate a world. `config_json` may be null for the default
 * configuration.
 */
enum ScStatus sc_world_generate(uint64_t seed, const char *config_json, struct ScWorld **out);

enum ScStatus sc_world_from_json(const char *json, struct ScWorld **out);

enum ScStatus sc_world_to_json(const struct ScWorld *world, char **out);

void sc_world_free(struct ScWorld *world);

/**
 * Render a corpus from a world. `config_json` may be null for the default
 * configuration.
 */
enum ScStatus sc_corpus_generate(const struct ScWorld *world,
                                 const char *config_json,
                                 struct ScCorpus **out);

enum ScStatus sc_corpus_n_tokens(const struct ScCorpus *corpus, size_t *out);

/**
 * Token id of `token` in the corpus vocabulary.
 */
enum ScStatus sc_corpus_token_id(const struct ScCorpus *corpus, const char *token, uint32_t *out);

void sc_corpus_free(struct ScCorpus *corpus);

/**
 * Load a trained checkpoint.
 */
enum ScStatus sc_model_load(const char *path, struct ScModel **out);

/**
 * Build a hand-wired oracle for a world and corpus.
 */
enum ScStatus sc_model_oracle(const struct ScWorld *world,
                              const struct ScCorpus *corpus,
                              enum ScOracleKind kind,
                              struct ScModel **out);

/**
 * Greedy next token after `tokens[0..len]`.
 */
enum ScStatus sc_model_next_token(const struct ScModel *model,
                                  const uint32_t *tokens,
                                  size_t len,
                                  uint32_t *out);

void sc_model_free(struct ScModel *model);

/**
 * Spearman RSA between two row-major `n`×`n` dissimilarity matrices.
 */
enum ScStatus sc_rsa_score(const double *a, const double *b, size_t n, double *out);

/**
 * Exploitation report as JSON. `settings_json` holds `ReportSettings`; null
 * uses the defaults.
 */
enum ScStatus sc_exploitation_report(const struct ScModel *model,
                                     const struct ScWorld *world,
                                     const struct ScCorpus *corpus,
                                     const char *settings_json,
                                     char **out_json);

/**
 * Run the full pipeline for a config file into `out_dir` (null: the
 * config's own directory) with `threads` workers (0: all cores). Writes the
 * report JSON to `out_json` when it is not null.
 */
enum ScStatus sc_audit(const char *config_path,
                       const char *out_dir,
                       uint32_t threads,
                       char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRUCTCORR_H */
