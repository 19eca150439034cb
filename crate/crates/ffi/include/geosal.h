#ifndef GEOSAL_H
#define GEOSAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL = 1,
  GS_STATUS_IO = 2,
  GS_STATUS_PARSE = 3,
  GS_STATUS_SHAPE = 4,
  GS_STATUS_INVALID = 5,
  GS_STATUS_NUMERICAL = 6,
  GS_STATUS_PANIC = 7,
} GsStatus;

// A point cloud with optional labels and saliency.
typedef struct GsCloud GsCloud;

// A trained model loaded from a checkpoint.
typedef struct GsModel GsModel;

// Scores of one prediction against its ground truth.
typedef struct GsMetrics {
  double mae;
  double f_measure;
  double e_measure;
  double iou;
} GsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *gs_last_error_message(void);

// Reads a PLY file.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum GsStatus gs_cloud_load(const char *path, struct GsCloud **out);

// Builds a cloud from `n` xyz triples. `rgb` (triples in [0,1]) and
// `labels` (0 or 1) may be null.
//
// # Safety
// Non-null arrays must hold `3n`, `3n` and `n` elements; `out` must be valid.
enum GsStatus gs_cloud_from_arrays(const double *xyz,
                                   const double *rgb,
                                   const uint8_t *labels,
                                   size_t n,
                                   struct GsCloud **out);

// Point count; 0 for a null handle.
//
// # Safety
// `cloud` must be null or a live handle.
size_t gs_cloud_len(const struct GsCloud *cloud);

// Writes the cloud as binary PLY, including labels and saliency when set.
//
// # Safety
// `cloud` must be a live handle and `path` a nul-terminated string.
enum GsStatus gs_cloud_save(const struct GsCloud *cloud, const char *path);

// # Safety
// `cloud` must be null or a handle not yet freed.
void gs_cloud_free(struct GsCloud *cloud);

// Loads a checkpoint (and its `.manifest` sibling).
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum GsStatus gs_model_load(const char *path, struct GsModel **out);

// # Safety
// `model` must be null or a handle not yet freed.
void gs_model_free(struct GsModel *model);

// Predicts per-point saliency into `saliency` (capacity `len`) and
// attaches it to the cloud, so a following save includes it.
//
// # Safety
// Handles must be live; `saliency` must hold `len` doubles.
enum GsStatus gs_segment(const struct GsModel *model,
                         struct GsCloud *cloud,
                         uint64_t seed,
                         double *saliency,
                         size_t len);

// Superpoint ids per point into `ids` (capacity `len`) and the superpoint
// count into `count`. A negative `gamma` selects the percentile rule.
// `model` may be null to cluster on the 9-channel input features.
//
// # Safety
// `cloud` must be live, `model` null or live, `ids` hold `len` values and
// `count` be valid.
enum GsStatus gs_partition(const struct GsCloud *cloud,
                           const struct GsModel *model,
                           size_t k,
                           double gamma,
                           uint64_t seed,
                           uint32_t *ids,
                           size_t len,
                           size_t *count);

// MAE, max F-measure (β² = 0.3), max E-measure and IoU at 0.5 of `n`
// saliency values against binary ground truth.
//
// # Safety
// `saliency` and `gt` must hold `n` elements; `out` must be valid.
enum GsStatus gs_metrics(const double *saliency,
                         const uint8_t *gt,
                         size_t n,
                         struct GsMetrics *out);

// Copies the cloud's saliency into `out` (capacity `len`); `GS_STATUS_INVALID`
// if none is attached.
//
// # Safety
// `cloud` must be live and `out` hold `len` doubles.
enum GsStatus gs_cloud_saliency(const struct GsCloud *cloud, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOSAL_H */
