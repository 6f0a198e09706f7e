#ifndef BDNN_H
#define BDNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BdnnStatus {
  BDNN_STATUS_OK = 0,
  BDNN_STATUS_NULL_POINTER = 1,
  BDNN_STATUS_INVALID_ARGUMENT = 2,
  BDNN_STATUS_DIMENSION_MISMATCH = 3,
  BDNN_STATUS_IO = 4,
  BDNN_STATUS_PARSE = 5,
  BDNN_STATUS_INFEASIBLE = 6,
  BDNN_STATUS_NO_INCUMBENT = 7,
  BDNN_STATUS_UNSUPPORTED = 8,
  BDNN_STATUS_NUMERICAL = 9,
  BDNN_STATUS_PANIC = 10,
} BdnnStatus;

/**
 * Samples with class labels.
 */
typedef struct BdnnDataset BdnnDataset;

/**
 * Trained network parameters.
 */
typedef struct BdnnNetwork BdnnNetwork;

/**
 * Options for exact training and model export.
 */
typedef struct BdnnTrainOptions {
  /**
   * Nonzero for weights in {-1, 0, 1}, zero for weights in [-1, 1].
   */
  uint8_t ternary;
  uint8_t use_bias;
  /**
   * Nonzero to learn thresholds, zero to fix them at 0.
   */
  uint8_t learn_thresholds;
  double epsilon;
  /**
   * Seconds; zero or negative for no limit.
   */
  double time_limit;
  /**
   * Zero for no limit.
   */
  uint64_t node_limit;
  /**
   * Relative gap in percent.
   */
  double gap_tolerance;
  uint64_t seed;
  size_t threads;
} BdnnTrainOptions;

/**
 * Accuracy and macro-averaged scores.
 */
typedef struct BdnnMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
} BdnnMetrics;

/**
 * Outcome of a training solve.
 */
typedef struct BdnnTrainSummary {
  double objective;
  double best_bound;
  /**
   * Percent; negative when no gap is known.
   */
  double gap;
  uint64_t nodes;
  /**
   * 1 when optimality was proven.
   */
  uint8_t optimal;
} BdnnTrainSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bdnn_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *bdnn_last_error_message(void);

struct BdnnTrainOptions bdnn_train_options_default(void);

/**
 * Dataset from a row-major `m x n` sample matrix and `m` labels in
 * `0..num_classes`.
 *
 * # Safety
 * `samples` must point to `m * n` doubles, `labels` to `m` values and `out`
 * to writable storage for one pointer.
 */
enum BdnnStatus bdnn_dataset_new(const double *samples,
                                 const size_t *labels,
                                 size_t m,
                                 size_t n,
                                 size_t num_classes,
                                 struct BdnnDataset **out);

/**
 * Reads a CSV; `label_column < 0` selects the last column.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BdnnStatus bdnn_dataset_load_csv(const char *path,
                                      ptrdiff_t label_column,
                                      uint8_t has_header,
                                      struct BdnnDataset **out);

/**
 * Number of samples, 0 for NULL.
 *
 * # Safety
 * `data` must be NULL or a live dataset handle.
 */
size_t bdnn_dataset_len(const struct BdnnDataset *data);

/**
 * Sample dimension, 0 for NULL or empty.
 *
 * # Safety
 * `data` must be NULL or a live dataset handle.
 */
size_t bdnn_dataset_dim(const struct BdnnDataset *data);

/**
 * # Safety
 * `data` must be NULL or a handle not yet freed.
 */
void bdnn_dataset_free(struct BdnnDataset *data);

/**
 * Loads parameters written by `bdnn train` or [`bdnn_network_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum BdnnStatus bdnn_network_load(const char *path, struct BdnnNetwork **out);

/**
 * # Safety
 * `net` must be a live network handle and `path` a NUL-terminated string.
 */
enum BdnnStatus bdnn_network_save(const struct BdnnNetwork *net, const char *path);

/**
 * # Safety
 * `net` must be NULL or a handle not yet freed.
 */
void bdnn_network_free(struct BdnnNetwork *net);

/**
 * Input dimension, 0 for NULL.
 *
 * # Safety
 * `net` must be NULL or a live network handle.
 */
size_t bdnn_network_input_dim(const struct BdnnNetwork *net);

/**
 * Number of classes (output width), 0 for NULL.
 *
 * # Safety
 * `net` must be NULL or a live network handle.
 */
size_t bdnn_network_num_classes(const struct BdnnNetwork *net);

/**
 * Predicted class of one sample.
 *
 * # Safety
 * `x` must point to `len` doubles and `class_out` be writable.
 */
enum BdnnStatus bdnn_network_predict(const struct BdnnNetwork *net,
                                     const double *x,
                                     size_t len,
                                     size_t *class_out);

/**
 * Output activations (0 or 1) of one sample. `capacity` must be at least the
 * number of classes.
 *
 * # Safety
 * `x` must point to `len` doubles and `bits_out` to `capacity` bytes.
 */
enum BdnnStatus bdnn_network_forward(const struct BdnnNetwork *net,
                                     const double *x,
                                     size_t len,
                                     uint8_t *bits_out,
                                     size_t capacity);

/**
 * Accuracy, precision, recall and F1 on a dataset.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum BdnnStatus bdnn_evaluate(const struct BdnnNetwork *net,
                              const struct BdnnDataset *data,
                              struct BdnnMetrics *out);

/**
 * Trains with the exact model. Status `NoIncumbent` means a limit was hit
 * before any network was found; `Infeasible` that none exists.
 *
 * # Safety
 * `hidden` must point to `hidden_len` widths; handles live; outputs writable.
 * `options` and `summary` may be NULL.
 */
enum BdnnStatus bdnn_train_exact(const struct BdnnDataset *data,
                                 const size_t *hidden,
                                 size_t hidden_len,
                                 const struct BdnnTrainOptions *options,
                                 struct BdnnNetwork **net_out,
                                 struct BdnnTrainSummary *summary);

/**
 * Writes the exact training model as MPS without solving it.
 *
 * # Safety
 * As for [`bdnn_train_exact`]; `path` must be a NUL-terminated string.
 */
enum BdnnStatus bdnn_export_mps(const struct BdnnDataset *data,
                                const size_t *hidden,
                                size_t hidden_len,
                                const struct BdnnTrainOptions *options,
                                const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BDNN_H */
