#ifndef EITL_TRIAGE_H
#define EITL_TRIAGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  EITL_LABEL_BENIGN = 0,
  EITL_LABEL_VULNERABLE = 1,
} EitlLabel;

typedef enum {
  EITL_STATUS_OK = 0,
  EITL_STATUS_NULL_POINTER = 1,
  EITL_STATUS_INVALID_UTF8 = 2,
  EITL_STATUS_INVALID_ARGUMENT = 3,
  EITL_STATUS_PARSE = 4,
  EITL_STATUS_IO = 5,
  EITL_STATUS_CLASSIFICATION = 6,
  EITL_STATUS_SIMULATION = 7,
  EITL_STATUS_PANIC = 8,
} EitlStatus;

typedef enum {
  EITL_ROUTE_QUARANTINE = 0,
  EITL_ROUTE_DEPLOY = 1,
  EITL_ROUTE_HUMAN_REVIEW = 2,
} EitlRoute;

/**
 * A loaded corpus.
 */
typedef struct EitlCorpus EitlCorpus;

/**
 * Canned log-probs keyed by sample id.
 */
typedef struct EitlFixture EitlFixture;

/**
 * Label scores and decision for one sample.
 */
typedef struct {
  double vulnerable;
  double benign;
  double confidence;
  EitlLabel predicted;
  /**
   * Non-zero when equal scores were resolved to benign.
   */
  uint8_t tie_broken;
} EitlScores;

typedef struct {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
  double f1_macro;
  double accuracy;
} EitlMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. Valid until
 * the next call into this library on the same thread.
 */
const char *eitl_last_error(void);

/**
 * Library version as a static string.
 */
const char *eitl_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 */
void eitl_string_free(char *s);

/**
 * Absolute gap between the two label scores.
 */
double eitl_confidence(double vulnerable, double benign);

/**
 * Higher-scoring label; equal scores give benign.
 */
EitlLabel eitl_predict(double vulnerable, double benign);

/**
 * Scores a first-token top-k list with the default answer vocabulary.
 * `tokens` and `logprobs` are parallel arrays of length `n`.
 */
EitlStatus eitl_score_tokens(const char *const *tokens,
                             const double *logprobs,
                             size_t n,
                             EitlScores *out);

/**
 * Three-way routing of one prediction against per-label thresholds.
 */
EitlStatus eitl_route(EitlLabel predicted,
                      double confidence,
                      double tau_vulnerable,
                      double tau_benign,
                      EitlRoute *out);

/**
 * Confusion counts, F1-macro and accuracy over parallel label arrays.
 */
EitlStatus eitl_metrics(const EitlLabel *predicted,
                        const EitlLabel *truth,
                        size_t n,
                        EitlMetrics *out);

/**
 * Loads a JSONL corpus. On success `*out` owns a handle.
 */
EitlStatus eitl_corpus_load(const char *path, EitlCorpus **out);

/**
 * Number of samples, or 0 for NULL.
 */
size_t eitl_corpus_len(const EitlCorpus *corpus);

/**
 * Content digest as a newly allocated hex string, or NULL for NULL.
 */
char *eitl_corpus_digest(const EitlCorpus *corpus);

void eitl_corpus_free(EitlCorpus *corpus);

/**
 * Loads a log-prob fixture. On success `*out` owns a handle.
 */
EitlStatus eitl_fixture_load(const char *path, EitlFixture **out);

void eitl_fixture_free(EitlFixture *fixture);

/**
 * Classifies `corpus` with `strategy` ("zero-shot", "fs-cross", "fs-in")
 * using `fixture` as the model, then sweeps review proportions and writes
 * the report CSV to `*out_csv`. `proportions` may be NULL for the default
 * grid. `seed` drives exemplar selection, random sampling and the analyst.
 */
EitlStatus eitl_simulate_csv(const EitlCorpus *corpus,
                             const EitlFixture *fixture,
                             const char *strategy,
                             const double *proportions,
                             size_t n_proportions,
                             uint64_t seed,
                             double expert_accuracy,
                             size_t n_random_repeats,
                             char **out_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EITL_TRIAGE_H */
