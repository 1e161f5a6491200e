#ifndef PERSONA_REFINERY_H
#define PERSONA_REFINERY_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PrStatus {
  PR_STATUS_OK = 0,
  PR_STATUS_NULL_ARGUMENT = 1,
  PR_STATUS_INVALID_UTF8 = 2,
  PR_STATUS_INVALID_ARGUMENT = 3,
  PR_STATUS_PROMPT_ERROR = 4,
  PR_STATUS_METRIC_ERROR = 5,
  PR_STATUS_RUN_ERROR = 6,
  PR_STATUS_JOURNAL_MISMATCH = 7,
  PR_STATUS_REPORT_ERROR = 8,
  PR_STATUS_SIM_ERROR = 9,
  PR_STATUS_PANIC = 10,
} PrStatus;

/**
 * Prompt templates, verbatim or corrected.
 */
typedef struct PrPromptRegistry PrPromptRegistry;

/**
 * A synthetic target that answers agent prompts.
 */
typedef struct PrSimWorld PrSimWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Free with
 * `pr_string_free`.
 */
char *pr_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void pr_string_free(char *s);

/**
 * Returns NULL on failure.
 */
struct PrPromptRegistry *pr_registry_new(bool corrected);

/**
 * # Safety
 * `registry` must be NULL or come from `pr_registry_new`, freed once.
 */
void pr_registry_free(struct PrPromptRegistry *registry);

/**
 * Renders `template_id` with a JSON object of bindings.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum PrStatus pr_registry_render(const struct PrPromptRegistry *registry,
                                 const char *template_id,
                                 const char *bindings_json,
                                 char **out);

/**
 * SHA-256 hex of a template body.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum PrStatus pr_registry_checksum(const struct PrPromptRegistry *registry,
                                   const char *template_id,
                                   char **out);

/**
 * # Safety
 * Pointers must be valid; `raw` NUL-terminated.
 */
enum PrStatus pr_normalize_persona(const char *raw, char **out);

/**
 * ROUGE-L F1 of two texts after tokenization.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum PrStatus pr_rouge_l_f1(const char *candidate, const char *reference, double *out);

/**
 * # Safety
 * `u` and `v` must each point to `len` doubles.
 */
enum PrStatus pr_cosine(const double *u, const double *v, size_t len, double *out);

/**
 * BERTScore F1 of row-major token matrices (`n × dim`).
 *
 * # Safety
 * `candidate` must point to `n_candidate * dim` doubles and `reference` to
 * `n_reference * dim`.
 */
enum PrStatus pr_bertscore_f1(const double *candidate,
                              size_t n_candidate,
                              const double *reference,
                              size_t n_reference,
                              size_t dim,
                              double *out);

/**
 * Builds a synthetic target from JSON such as
 * `{"hidden_attrs":["a","b"],"release_rate":2,"seed":0}`.
 *
 * # Safety
 * Pointers must be valid; `target_json` NUL-terminated.
 */
enum PrStatus pr_simworld_new(const char *target_json, struct PrSimWorld **out);

/**
 * # Safety
 * `sim` must be NULL or come from `pr_simworld_new`, freed once.
 */
void pr_simworld_free(struct PrSimWorld *sim);

/**
 * The target's ground-truth behavior.
 *
 * # Safety
 * Pointers must be valid.
 */
enum PrStatus pr_simworld_ground_truth(const struct PrSimWorld *sim, char **out);

/**
 * Answers one rendered agent prompt as the scripted target would.
 *
 * # Safety
 * Pointers must be valid; `prompt` NUL-terminated.
 */
enum PrStatus pr_simworld_chat(const struct PrSimWorld *sim, const char *prompt, char **out);

/**
 * Runs (or resumes) the manifest at `manifest_path`. On success
 * `summary_json` (may be NULL) receives a JSON run summary.
 *
 * # Safety
 * Pointers must be valid; `manifest_path` NUL-terminated.
 */
enum PrStatus pr_run_manifest(const char *manifest_path, bool resume, char **summary_json);

/**
 * Aggregates one journal and writes curve and comparison TSV files into
 * `out_dir`. `report_json` (may be NULL) receives the report as JSON.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum PrStatus pr_aggregate(const char *journal_path, const char *out_dir, char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERSONA_REFINERY_H */
