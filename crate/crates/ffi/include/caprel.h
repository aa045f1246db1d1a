#ifndef CAPREL_H
#define CAPREL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CaprelStatus {
  CAPREL_STATUS_OK = 0,
  CAPREL_STATUS_NULL_POINTER = 1,
  CAPREL_STATUS_INVALID_ARGUMENT = 2,
  CAPREL_STATUS_DIMENSION = 3,
  CAPREL_STATUS_INDEX = 4,
  CAPREL_STATUS_NON_FINITE = 5,
  CAPREL_STATUS_EMPTY = 6,
  CAPREL_STATUS_CONFIG = 7,
  CAPREL_STATUS_PARSE = 8,
  CAPREL_STATUS_INTEGRITY = 9,
  CAPREL_STATUS_NOT_FOUND = 10,
  CAPREL_STATUS_DIVERGENCE = 11,
  CAPREL_STATUS_UNSUPPORTED = 12,
  CAPREL_STATUS_IO = 13,
  CAPREL_STATUS_PANIC = 14,
} CaprelStatus;

/**
 * A loaded set of relation-extraction instances.
 */
typedef struct CaprelCorpus CaprelCorpus;

/**
 * A relation classifier with its vocabulary and label set.
 */
typedef struct CaprelModel CaprelModel;

/**
 * Scores against gold labels. Precision, recall and F1 are micro-averaged
 * over relations other than `no_relation`.
 */
typedef struct CaprelMetrics {
  double micro_precision;
  double micro_recall;
  double micro_f1;
  double macro_f1;
  double accuracy;
  size_t n;
} CaprelMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *caprel_last_error(void);

/**
 * Library version as a static string.
 */
const char *caprel_version(void);

/**
 * Loads a corpus (`.jsonl`, TACRED `.json` or Conll04), guessing the format
 * from the extension.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum CaprelStatus caprel_corpus_load(const char *path, struct CaprelCorpus **out);

/**
 * Generates a synthetic corpus. `spec_json` holds generator settings (NULL
 * for defaults); `split` is 0 train, 1 eval, 2 test.
 *
 * # Safety
 * `spec_json` must be NULL or a valid C string; `out` must be valid.
 */
enum CaprelStatus caprel_corpus_synthetic(const char *spec_json,
                                          uint32_t split,
                                          struct CaprelCorpus **out);

/**
 * Number of instances, or 0 for NULL.
 *
 * # Safety
 * `corpus` must be NULL or a live handle.
 */
size_t caprel_corpus_len(const struct CaprelCorpus *corpus);

/**
 * # Safety
 * `corpus` must be NULL or a handle not yet freed.
 */
void caprel_corpus_free(struct CaprelCorpus *corpus);

/**
 * Builds an untrained model for `train`'s labels and vocabulary.
 * `config_json` is a model configuration (NULL: H3 head, Mix sentences).
 *
 * # Safety
 * Pointers must be valid; `config_json` may be NULL.
 */
enum CaprelStatus caprel_model_new(const char *config_json,
                                   const struct CaprelCorpus *train,
                                   uint64_t seed,
                                   struct CaprelModel **out);

/**
 * Restores a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum CaprelStatus caprel_model_load(const char *path, struct CaprelModel **out);

/**
 * Writes the model parameters (no optimizer state) to `path`.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid C string.
 */
enum CaprelStatus caprel_model_save(const struct CaprelModel *model, const char *path);

/**
 * Trains in place. `config_json` holds training settings (NULL: defaults).
 * The mean loss of the final epoch is written to `final_loss` when it is
 * not NULL.
 *
 * # Safety
 * `model` and `corpus` must be live handles; `config_json` and
 * `final_loss` may be NULL.
 */
enum CaprelStatus caprel_model_train(struct CaprelModel *model,
                                     const struct CaprelCorpus *corpus,
                                     const char *config_json,
                                     double *final_loss);

/**
 * Number of relation labels the model predicts.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t caprel_model_num_labels(const struct CaprelModel *model);

/**
 * Name of label `index`, owned by the model handle; NULL when out of range.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
const char *caprel_model_label(const struct CaprelModel *model, size_t index);

/**
 * Scores instance `index` of `corpus`: writes `num_labels` logits to
 * `logits` (capacity `capacity`) and the arg-max label to `label`.
 *
 * # Safety
 * Handles must be live; `logits` must hold `capacity` doubles; `label`
 * must be valid.
 */
enum CaprelStatus caprel_model_predict(const struct CaprelModel *model,
                                       const struct CaprelCorpus *corpus,
                                       size_t index,
                                       double *logits,
                                       size_t capacity,
                                       size_t *label);

/**
 * Predicts every instance of `corpus` and scores the predictions.
 *
 * # Safety
 * Handles must be live and `out` valid.
 */
enum CaprelStatus caprel_model_evaluate(const struct CaprelModel *model,
                                        const struct CaprelCorpus *corpus,
                                        struct CaprelMetrics *out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void caprel_model_free(struct CaprelModel *model);

/**
 * Routes `m` input capsules of width `d_in` (row-major) into `n_out`
 * capsules of width `d_out`. `weights` is `d_in × (n_out·d_out)` row-major,
 * output `j` owning columns `j·d_out..(j+1)·d_out`; `bias` has
 * `n_out·d_out` entries. Writes `n_out·d_out` values to `capsules` and the
 * final `m × n_out` credits to `credits` (may be NULL).
 *
 * # Safety
 * Every non-NULL buffer must hold the number of doubles stated above.
 */
enum CaprelStatus caprel_route(const double *inputs,
                               size_t m,
                               size_t d_in,
                               const double *weights,
                               const double *bias,
                               size_t n_out,
                               size_t d_out,
                               size_t iterations,
                               double *capsules,
                               double *credits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPREL_H */
