#ifndef MMIE_H
#define MMIE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum MmieStatus {
  MMIE_STATUS_OK = 0,
  MMIE_STATUS_NULL_POINTER = 1,
  MMIE_STATUS_INVALID_ARGUMENT = 2,
  MMIE_STATUS_CONFIG = 3,
  MMIE_STATUS_SHAPE = 4,
  MMIE_STATUS_PARSE = 5,
  MMIE_STATUS_CHECKPOINT = 6,
  MMIE_STATUS_NON_FINITE = 7,
  MMIE_STATUS_IO = 8,
  MMIE_STATUS_PANIC = 9,
} MmieStatus;

/**
 * A loaded model.
 */
typedef struct MmieModel MmieModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mmie_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *mmie_last_error(void);

/**
 * Negative log-likelihood of `tags` under a linear-chain CRF.
 *
 * `emissions` is `n x num_tags` and `transitions` is `num_tags x num_tags`
 * (from row, to column), both row-major; `start`, `end` and `tags` hold
 * `num_tags`, `num_tags` and `n` entries.
 *
 * # Safety
 * Every pointer must be valid for the stated number of elements.
 */
enum MmieStatus mmie_crf_nll(const double *emissions,
                             size_t n,
                             size_t num_tags,
                             const double *transitions,
                             const double *start,
                             const double *end,
                             const size_t *tags,
                             double *out_nll);

/**
 * Highest-scoring tag path (ties go to the lowest tag id) and its score.
 * Inputs are laid out as in [`mmie_crf_nll`]; `out_tags` receives `n` ids.
 *
 * # Safety
 * Every pointer must be valid for the stated number of elements.
 */
enum MmieStatus mmie_crf_viterbi(const double *emissions,
                                 size_t n,
                                 size_t num_tags,
                                 const double *transitions,
                                 const double *start,
                                 const double *end,
                                 size_t *out_tags,
                                 double *out_score);

/**
 * Closed-form `KL(p ‖ q)` between diagonal Gaussians of dimension `k`.
 *
 * # Safety
 * The four parameter pointers must each hold `k` values.
 */
enum MmieStatus mmie_gaussian_kl(const double *mean_p,
                                 const double *logvar_p,
                                 const double *mean_q,
                                 const double *logvar_q,
                                 size_t k,
                                 double *out_kl);

/**
 * Loads the checkpoint written by `mmie train` for the run described by the
 * config file. On success `*out_model` owns a handle.
 *
 * # Safety
 * Paths must be NUL-terminated; `out_model` must be writable.
 */
enum MmieStatus mmie_model_load(const char *config_path,
                                const char *checkpoint_path,
                                struct MmieModel **out_model);

/**
 * Releases a model handle; NULL is ignored.
 *
 * # Safety
 * `model` must come from [`mmie_model_load`] and not be used afterwards.
 */
void mmie_model_free(struct MmieModel *model);

/**
 * Number of output labels: BIO tags for tagging models, relation classes otherwise.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum MmieStatus mmie_model_num_labels(const struct MmieModel *model, size_t *out_count);

/**
 * Micro precision, recall and F1 of the model on a corpus file.
 *
 * # Safety
 * `model` must be a live handle, `corpus_path` NUL-terminated and the outputs writable.
 */
enum MmieStatus mmie_model_evaluate(const struct MmieModel *model,
                                    const char *corpus_path,
                                    double *out_precision,
                                    double *out_recall,
                                    double *out_f1);

/**
 * Predictions for every sample of a corpus file as a JSON array of
 * `{"id", "tags"}` or `{"id", "relation"}` objects. Free the string with
 * [`mmie_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `corpus_path` NUL-terminated and `out_json` writable.
 */
enum MmieStatus mmie_model_predict_json(const struct MmieModel *model,
                                        const char *corpus_path,
                                        char **out_json);

/**
 * Releases a string returned by this library; NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void mmie_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMIE_H */
