#ifndef MRFLOW_H
#define MRFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum MrflowStatus {
  MRFLOW_STATUS_OK = 0,
  MRFLOW_STATUS_NULL_POINTER = 1,
  MRFLOW_STATUS_INVALID_ARGUMENT = 2,
  MRFLOW_STATUS_DIMENSION = 3,
  MRFLOW_STATUS_CONTRACT = 4,
  MRFLOW_STATUS_DIVERGENCE = 5,
  MRFLOW_STATUS_FORMAT = 6,
  MRFLOW_STATUS_CONFIG = 7,
  MRFLOW_STATUS_IO = 8,
  MRFLOW_STATUS_PANIC = 9,
} MrflowStatus;

/**
 * Patch transform used by [`mrflow_decompose`].
 */
typedef enum MrflowTransform {
  MRFLOW_TRANSFORM_UNIMODULAR = 0,
  MRFLOW_TRANSFORM_HAAR = 1,
} MrflowTransform;

/**
 * A trained multi-resolution model.
 */
typedef struct MrflowModel MrflowModel;

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *mrflow_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mrflow_version(void);

/**
 * Loads every level checkpoint in directory `dir` (UTF-8 path).
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MrflowStatus mrflow_model_load(const char *dir, struct MrflowModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`mrflow_model_load`] and not be used afterwards.
 */
void mrflow_model_free(struct MrflowModel *model);

/**
 * Number of resolution levels.
 *
 * # Safety
 * `model` must be a live handle and `levels` writable.
 */
enum MrflowStatus mrflow_model_levels(const struct MrflowModel *model, size_t *levels);

/**
 * Writes the finest image shape `[C, H, W]` to `shape`.
 *
 * # Safety
 * `model` must be a live handle and `shape` point to three writable values.
 */
enum MrflowStatus mrflow_model_image_shape(const struct MrflowModel *model, size_t *shape);

/**
 * Bits per dimension of one 8-bit image of the model's shape.
 *
 * # Safety
 * `pixels` must hold `len` bytes and `out` be writable.
 */
enum MrflowStatus mrflow_bpd(const struct MrflowModel *model,
                             const uint8_t *pixels,
                             size_t len,
                             uint64_t seed,
                             double *out);

/**
 * Generates `count` 8-bit samples back to back into `out`, which must hold
 * `count·C·H·W` bytes (`out_len`).
 *
 * # Safety
 * `out` must hold `out_len` writable bytes.
 */
enum MrflowStatus mrflow_generate(const struct MrflowModel *model,
                                  size_t count,
                                  double temperature,
                                  uint64_t seed,
                                  uint8_t *out,
                                  size_t out_len);

/**
 * Decomposes an 8-bit `C×H×W` image (pixels at bin centres) into `levels`
 * resolutions. `coeffs` receives `y_1, …, y_{S−1}, x_S` concatenated, which
 * is exactly `C·H·W` values; `logdet` receives the transform log-determinant.
 *
 * # Safety
 * `pixels` must hold `C·H·W` bytes, `coeffs` as many writable doubles.
 */
enum MrflowStatus mrflow_decompose(const uint8_t *pixels,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   size_t levels,
                                   enum MrflowTransform transform,
                                   double *coeffs,
                                   double *logdet);

#endif  /* MRFLOW_H */
