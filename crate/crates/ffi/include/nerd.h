#ifndef NERD_H
#define NERD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum NerdStatus {
  NERD_STATUS_OK = 0,
  NERD_STATUS_NULL_POINTER = 1,
  NERD_STATUS_INVALID_ARGUMENT = 2,
  NERD_STATUS_SHAPE = 3,
  NERD_STATUS_CONFIG = 4,
  NERD_STATUS_FORMAT = 5,
  NERD_STATUS_IO = 6,
  NERD_STATUS_UNDEFINED_BOUNDARY = 7,
  NERD_STATUS_INTERNAL = 8,
} NerdStatus;

/**
 * Head variant of a loaded model.
 */
typedef enum NerdHead {
  NERD_HEAD_BASELINE = 0,
  NERD_HEAD_NERDM = 1,
  NERD_HEAD_NERDC = 2,
} NerdHead;

/**
 * Opaque handle to a model loaded from a checkpoint.
 */
typedef struct NerdModel NerdModel;

typedef struct NerdModelInfo {
  size_t in_channels;
  size_t feature_channels;
  size_t param_count;
  uint32_t head;
} NerdModelInfo;

/**
 * Lesion-wise scores as fractions. Undefined values are NaN.
 */
typedef struct NerdLesionMetrics {
  double ldice;
  double ltpr;
  double lfpr;
  size_t gt_lesions;
  size_t pred_lesions;
} NerdLesionMetrics;

/**
 * Surface distances in physical units.
 */
typedef struct NerdSurfaceMetrics {
  double hd;
  double hd95;
  double asd;
} NerdSurfaceMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *nerd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nerd_version(void);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 * The handle must be released with [`nerd_model_free`].
 */
enum NerdStatus nerd_model_load(const char *path, struct NerdModel **out);

/**
 * Releases a handle from [`nerd_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`nerd_model_load`] and not be used afterwards.
 */
void nerd_model_free(struct NerdModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum NerdStatus nerd_model_info(const struct NerdModel *model, struct NerdModelInfo *out);

/**
 * Foreground probabilities, `batch * height * width` values written to `out`.
 *
 * # Safety
 * `images` must hold `batch * height * width * channels` doubles and `out`
 * room for `batch * height * width`.
 */
enum NerdStatus nerd_model_predict(const struct NerdModel *model,
                                   const double *images,
                                   size_t batch,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   double *out);

/**
 * Binary masks thresholded at `threshold`, `batch * height * width` bytes.
 *
 * # Safety
 * As [`nerd_model_predict`], with `out` holding bytes.
 */
enum NerdStatus nerd_model_segment(const struct NerdModel *model,
                                   const double *images,
                                   size_t batch,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   double threshold,
                                   uint8_t *out);

/**
 * Distances of every pixel to the top, right, bottom and left borders,
 * `height * width * 4` values, optionally min-max normalized per channel.
 *
 * # Safety
 * `out` must have room for `height * width * 4` doubles.
 */
enum NerdStatus nerd_position_field(size_t height, size_t width, bool normalized, double *out);

/**
 * Voxel Dice of two masks, as a fraction.
 *
 * # Safety
 * `pred` and `gt` must each hold `depth * height * width` bytes.
 */
enum NerdStatus nerd_dice(const uint8_t *pred,
                          const uint8_t *gt,
                          size_t depth,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * Lesion-wise metrics with the given connectivity (4, 8, 6 or 26).
 *
 * # Safety
 * As [`nerd_dice`].
 */
enum NerdStatus nerd_lesion_metrics(const uint8_t *pred,
                                    const uint8_t *gt,
                                    size_t depth,
                                    size_t height,
                                    size_t width,
                                    uint32_t connectivity,
                                    uint32_t ldice_factor,
                                    struct NerdLesionMetrics *out);

/**
 * Hausdorff, 95th-percentile Hausdorff and average surface distance.
 * Returns `UndefinedBoundary` when either mask is empty.
 *
 * # Safety
 * As [`nerd_dice`]; `spacing` must point to 3 doubles (depth, height, width).
 */
enum NerdStatus nerd_surface_metrics(const uint8_t *pred,
                                     const uint8_t *gt,
                                     size_t depth,
                                     size_t height,
                                     size_t width,
                                     const double *spacing,
                                     struct NerdSurfaceMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NERD_H */
