#ifndef PROTOGMM_H
#define PROTOGMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgmmStatus {
  PGMM_STATUS_OK = 0,
  PGMM_STATUS_NULL_ARGUMENT = 1,
  PGMM_STATUS_IO = 2,
  PGMM_STATUS_PARSE = 3,
  PGMM_STATUS_VERSION = 4,
  PGMM_STATUS_CONFIG = 5,
  PGMM_STATUS_INPUT = 6,
  PGMM_STATUS_CONTRACT = 7,
  PGMM_STATUS_NOT_READY = 8,
  PGMM_STATUS_DEGENERATE = 9,
  PGMM_STATUS_PANIC = 10,
} PgmmStatus;

typedef enum PgmmPredictor {
  PGMM_PREDICTOR_HEAD = 0,
  PGMM_PREDICTOR_GMM = 1,
} PgmmPredictor;

/**
 * A set of input vectors with optional labels.
 */
typedef struct PgmmDataset PgmmDataset;

/**
 * A frozen adaptation state for inference.
 */
typedef struct PgmmModel PgmmModel;

/**
 * A training run over owned copies of its datasets.
 */
typedef struct PgmmTrainer PgmmTrainer;

/**
 * Loss terms of one training iteration.
 */
typedef struct PgmmIterStats {
  uint64_t iteration;
  double total;
  double ce_source;
  double ce_target;
  double contrast_source;
  double contrast_target;
  double confidence;
  /**
   * 1 when the term contributed a gradient this iteration.
   */
  uint8_t source_contrast_applied;
  uint8_t target_contrast_applied;
} PgmmIterStats;

typedef struct PgmmMetrics {
  double accuracy;
  double miou;
  double macro_precision;
  double macro_recall;
  double macro_f1;
} PgmmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *pgmm_last_error(void);

/**
 * Reads a dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PgmmStatus pgmm_dataset_read(const char *path, struct PgmmDataset **out);

/**
 * Builds a dataset from `n * dim` row-major values and `n` labels, where a
 * negative label marks an unlabeled sample. `labels` may be NULL.
 *
 * # Safety
 * `values` must hold `n * dim` doubles and `labels`, if non-null, `n` entries.
 */
enum PgmmStatus pgmm_dataset_from_rows(const double *values,
                                       const int64_t *labels,
                                       size_t n,
                                       size_t dim,
                                       size_t n_classes,
                                       struct PgmmDataset **out);

/**
 * Generates a source/target pair from a `key = value` domain spec. The
 * target comes back unlabeled; `target_labeled`, if non-null, receives a
 * copy carrying the held-out labels.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; output pointers must be writable.
 */
enum PgmmStatus pgmm_generate_pair(const char *spec,
                                   struct PgmmDataset **source,
                                   struct PgmmDataset **target,
                                   struct PgmmDataset **target_labeled);

/**
 * # Safety
 * `ds` must be a live dataset handle; `len`, `dim`, `n_classes` writable or NULL.
 */
enum PgmmStatus pgmm_dataset_shape(const struct PgmmDataset *ds,
                                   size_t *len,
                                   size_t *dim,
                                   size_t *n_classes);

/**
 * # Safety
 * `ds` must come from this library and not be used afterwards. NULL is a no-op.
 */
void pgmm_dataset_free(struct PgmmDataset *ds);

/**
 * Creates a trainer from a `key = value` config (NULL for defaults). The
 * datasets are copied; the source must be fully labeled.
 *
 * # Safety
 * Pointers must be valid handles or NUL-terminated strings; `out` writable.
 */
enum PgmmStatus pgmm_trainer_new(const char *config,
                                 const struct PgmmDataset *source,
                                 const struct PgmmDataset *target,
                                 struct PgmmTrainer **out);

/**
 * Runs one iteration. `stats` may be NULL.
 *
 * # Safety
 * `trainer` must be a live handle; `stats` writable or NULL.
 */
enum PgmmStatus pgmm_trainer_step(struct PgmmTrainer *trainer, struct PgmmIterStats *stats);

/**
 * Runs the remaining iterations of the configured schedule.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum PgmmStatus pgmm_trainer_run(struct PgmmTrainer *trainer);

/**
 * Iterations completed so far.
 *
 * # Safety
 * `trainer` must be a live handle; `out` writable.
 */
enum PgmmStatus pgmm_trainer_iteration(const struct PgmmTrainer *trainer, uint64_t *out);

/**
 * Writes a checkpoint directory readable by `pgmm_model_load` and the CLI.
 *
 * # Safety
 * `trainer` must be a live handle; `dir` a NUL-terminated string.
 */
enum PgmmStatus pgmm_trainer_save(const struct PgmmTrainer *trainer, const char *dir);

/**
 * Copies the current state into an inference handle.
 *
 * # Safety
 * `trainer` must be a live handle; `out` writable.
 */
enum PgmmStatus pgmm_trainer_snapshot(const struct PgmmTrainer *trainer, struct PgmmModel **out);

/**
 * # Safety
 * `trainer` must come from this library and not be used afterwards. NULL is a no-op.
 */
void pgmm_trainer_free(struct PgmmTrainer *trainer);

/**
 * Loads the state from a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` writable.
 */
enum PgmmStatus pgmm_model_load(const char *dir, struct PgmmModel **out);

/**
 * Predicted class of one input vector.
 *
 * # Safety
 * `model` must be a live handle, `x` must hold `dim` doubles, `class_out` writable.
 */
enum PgmmStatus pgmm_model_predict(const struct PgmmModel *model,
                                   const double *x,
                                   size_t dim,
                                   enum PgmmPredictor which,
                                   size_t *class_out);

/**
 * Unit-norm embedding of one input vector; `out` must hold the model's
 * embedding dimension.
 *
 * # Safety
 * `model` must be a live handle, `x` must hold `dim` doubles, `out` `out_len`.
 */
enum PgmmStatus pgmm_model_embed(const struct PgmmModel *model,
                                 const double *x,
                                 size_t dim,
                                 double *out,
                                 size_t out_len);

/**
 * Metrics of the model on a fully labeled dataset.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum PgmmStatus pgmm_model_evaluate(const struct PgmmModel *model,
                                    const struct PgmmDataset *data,
                                    enum PgmmPredictor which,
                                    struct PgmmMetrics *out);

/**
 * Class count of the model.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum PgmmStatus pgmm_model_n_classes(const struct PgmmModel *model, size_t *out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. NULL is a no-op.
 */
void pgmm_model_free(struct PgmmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOGMM_H */
