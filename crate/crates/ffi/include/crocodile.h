/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef CROCODILE_H
#define CROCODILE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function of the API.
typedef enum CrocStatus {
  CROC_STATUS_OK = 0,
  CROC_STATUS_NULL_POINTER = 1,
  CROC_STATUS_INVALID_ARGUMENT = 2,
  CROC_STATUS_SHAPE_MISMATCH = 3,
  CROC_STATUS_UNDEFINED_METRIC = 4,
  CROC_STATUS_IO = 5,
  CROC_STATUS_CHECKPOINT = 6,
  CROC_STATUS_CONFIG = 7,
  CROC_STATUS_BUFFER_TOO_SMALL = 8,
  CROC_STATUS_INTERNAL = 9,
  CROC_STATUS_PANIC = 10,
} CrocStatus;

// A parsed causal graph over findings.
typedef struct CrocCausalGraph CrocCausalGraph;

// A loaded model.
typedef struct CrocModel CrocModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL if none. The pointer
// stays valid until the next failing call on the same thread.
const char *croc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *croc_version(void);

// Loads a checkpoint file into a new model handle written to `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CrocStatus croc_model_load(const char *path, struct CrocModel **out);

// Releases a model handle. NULL is ignored.
//
// # Safety
// `model` must come from [`croc_model_load`] and not be used afterwards.
void croc_model_free(struct CrocModel *model);

// Number of disease classes, image channels and image side length.
//
// # Safety
// All pointers must be valid.
enum CrocStatus croc_model_dims(const struct CrocModel *model,
                                size_t *n_classes,
                                size_t *channels,
                                size_t *image_size);

// Disease probabilities for `n_images` images laid out as
// `n_images × channels × size × size` floats in `[0, 1]`. Writes
// `n_images × n_classes` values to `out`. A nonzero `use_intervened` scores
// with the intervened head.
//
// # Safety
// `images` must hold `images_len` floats and `out` `out_len` floats.
enum CrocStatus croc_model_predict(const struct CrocModel *model,
                                   const float *images,
                                   size_t images_len,
                                   size_t n_images,
                                   int32_t use_intervened,
                                   float *out,
                                   size_t out_len);

// Parses a causal graph from text: one finding name per line, then edges as
// `parent -> child`; `#` starts a comment.
//
// # Safety
// `text` must be NUL-terminated and `out` valid.
enum CrocStatus croc_graph_parse(const char *text, struct CrocCausalGraph **out);

// Releases a graph handle. NULL is ignored.
//
// # Safety
// `graph` must come from [`croc_graph_parse`] and not be used afterwards.
void croc_graph_free(struct CrocCausalGraph *graph);

// Number of findings in the graph.
//
// # Safety
// Pointers must be valid.
enum CrocStatus croc_graph_num_nodes(const struct CrocCausalGraph *graph, size_t *out);

// Ground-truth causality map, row-major `n × n`: `hi` where the column finding
// is an ancestor of the row finding, `lo` for the reverse, `base` elsewhere.
//
// # Safety
// `out` must hold `out_len` doubles.
enum CrocStatus croc_graph_gt_map(const struct CrocCausalGraph *graph,
                                  double hi,
                                  double lo,
                                  double base,
                                  double *out,
                                  size_t out_len);

// Per-sample causality maps from disease-causal embeddings laid out as
// `batch × n × h`. With nonzero `normalize` the embeddings are first clamped
// at 0 and divided by their maximum. Writes `batch × n × n` values.
//
// # Safety
// `q` must hold `batch·n·h` doubles and `out` `out_len` doubles.
enum CrocStatus croc_causality_map(const double *q,
                                   size_t batch,
                                   size_t n,
                                   size_t h,
                                   int32_t normalize,
                                   double *out,
                                   size_t out_len);

// Area under the ROC curve with ties counted one half.
//
// # Safety
// `scores` and `labels` must hold `n` values; `out` must be valid.
enum CrocStatus croc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Step-interpolated average precision.
//
// # Safety
// `scores` and `labels` must hold `n` values; `out` must be valid.
enum CrocStatus croc_average_precision(const double *scores,
                                       const uint8_t *labels,
                                       size_t n,
                                       double *out);

// Relative drop in percent, `100 · (id − ood) / id`.
//
// # Safety
// `out` must be valid.
enum CrocStatus croc_drop(double id_mean, double ood_mean, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROCODILE_H */
