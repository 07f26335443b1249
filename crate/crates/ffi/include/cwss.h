#ifndef CWSS_H
#define CWSS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Segmentation modes accepted by `cwss_segment`.
 */
#define CWSS_MODE_MORPHOLOGICAL 0

#define CWSS_MODE_FUNCTIONAL 1

/**
 * Result of every call.
 */
typedef enum CwssStatus {
  CWSS_STATUS_OK = 0,
  CWSS_STATUS_NULL_POINTER = 1,
  CWSS_STATUS_INVALID_ARGUMENT = 2,
  CWSS_STATUS_SHAPE = 3,
  CWSS_STATUS_CONFIG = 4,
  CWSS_STATUS_DATA = 5,
  CWSS_STATUS_NUMERIC = 6,
  CWSS_STATUS_IO = 7,
  CWSS_STATUS_CHECKPOINT_TRUNCATED = 8,
  CWSS_STATUS_CHECKPOINT_BAD_MAGIC = 9,
  CWSS_STATUS_CHECKPOINT_VERSION = 10,
  CWSS_STATUS_CHECKPOINT_CHECKSUM = 11,
  CWSS_STATUS_CHECKPOINT_MALFORMED = 12,
  CWSS_STATUS_ARCHITECTURE_MISMATCH = 13,
  CWSS_STATUS_PANIC = 14,
} CwssStatus;

/**
 * Opaque model handle.
 */
typedef struct CwssModel CwssModel;

/**
 * Options for `cwss_segment`; start from `cwss_segment_options_default`.
 */
typedef struct CwssSegmentOptions {
  float threshold;
  float blur_sigma;
  uint32_t samples;
  float sigma;
  uint64_t seed;
} CwssSegmentOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *cwss_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cwss_version(void);

/**
 * Number of tissue classes (length of the score vector).
 */
uint32_t cwss_num_classes(void);

/**
 * Code of a mask label (`0..29`), e.g. `"S.M"` or `"Background"`; null when out of range.
 */
const char *cwss_class_code(uint32_t label);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CwssStatus cwss_model_load(const char *path, struct CwssModel **out);

/**
 * Creates a freshly initialized model. `preset` is `"full"`, `"compact"` or `"tiny"`.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CwssStatus cwss_model_init(const char *preset, uint64_t seed, struct CwssModel **out);

/**
 * Writes the model parameters to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum CwssStatus cwss_model_save(const struct CwssModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void cwss_model_free(struct CwssModel *model);

/**
 * Side length of the square input images; 0 for a null model.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uint32_t cwss_model_input_size(const struct CwssModel *model);

/**
 * Class scores (capsule lengths) for one image.
 *
 * # Safety
 * `image` must point to `image_len` floats and `scores` to `scores_len` floats.
 */
enum CwssStatus cwss_classify(const struct CwssModel *model,
                              const float *image,
                              size_t image_len,
                              float *scores,
                              size_t scores_len);

struct CwssSegmentOptions cwss_segment_options_default(void);

/**
 * Label mask (`S × S` bytes, row-major) for one image. `options` may be null
 * for the defaults.
 *
 * # Safety
 * `image` must point to `image_len` floats, `mask` to `mask_len` bytes, and
 * `options` must be null or valid.
 */
enum CwssStatus cwss_segment(const struct CwssModel *model,
                             const float *image,
                             size_t image_len,
                             int32_t mode,
                             const struct CwssSegmentOptions *options,
                             uint8_t *mask,
                             size_t mask_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CWSS_H */
