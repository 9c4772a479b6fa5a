#ifndef ENERF_H
#define ENERF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum EnerfStatus {
  ENERF_STATUS_OK = 0,
  ENERF_STATUS_NULL_POINTER = 1,
  ENERF_STATUS_INVALID_ARGUMENT = 2,
  ENERF_STATUS_IO = 3,
  ENERF_STATUS_FORMAT = 4,
  ENERF_STATUS_CHECKPOINT = 5,
  ENERF_STATUS_BUFFER_TOO_SMALL = 6,
  ENERF_STATUS_PANIC = 7,
} EnerfStatus;

/**
 * Sampling strategy for [`enerf_render_view`] and [`enerf_render_pose`].
 */
typedef enum EnerfMode {
  ENERF_MODE_GUIDED = 0,
  ENERF_MODE_UNIFORM = 1,
} EnerfMode;

/**
 * Opaque multi-view dataset.
 */
typedef struct EnerfDataset EnerfDataset;

/**
 * Opaque trained weights.
 */
typedef struct EnerfModel EnerfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *enerf_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * excluding the terminator, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t enerf_last_error_message(char *buf, size_t len);

/**
 * Loads a dataset directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` a valid pointer.
 */
enum EnerfStatus enerf_dataset_load(const char *dir, struct EnerfDataset **out);

/**
 * Generates a preset scene (`"plane-sphere"` or `"micro"`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` a valid pointer.
 */
enum EnerfStatus enerf_dataset_generate(const char *preset,
                                        uint64_t seed,
                                        struct EnerfDataset **out);

/**
 * Writes a dataset directory.
 *
 * # Safety
 * `ds` must come from this library; `dir` must be a NUL-terminated string.
 */
enum EnerfStatus enerf_dataset_save(const struct EnerfDataset *ds, const char *dir);

/**
 * Number of views and the shared image size.
 *
 * # Safety
 * `ds` must come from this library; the out pointers must be valid.
 */
enum EnerfStatus enerf_dataset_info(const struct EnerfDataset *ds,
                                    size_t *views,
                                    size_t *width,
                                    size_t *height);

/**
 * # Safety
 * `ds` must be null or come from this library and not be used afterwards.
 */
void enerf_dataset_free(struct EnerfDataset *ds);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum EnerfStatus enerf_model_load(const char *path, struct EnerfModel **out);

/**
 * Freshly initialized, untrained weights.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum EnerfStatus enerf_model_init(uint64_t seed, struct EnerfModel **out);

/**
 * Writes a checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum EnerfStatus enerf_model_save(const struct EnerfModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or come from this library and not be used afterwards.
 */
void enerf_model_free(struct EnerfModel *model);

/**
 * Renders dataset view `view_id` into `rgb` (H·W·3 floats, row-major RGB)
 * and, when `depth` is not null, the predicted depth (H·W floats).
 *
 * # Safety
 * Handles must come from this library; `rgb`/`depth` must be valid for
 * `rgb_len`/`depth_len` floats.
 */
enum EnerfStatus enerf_render_view(const struct EnerfDataset *ds,
                                   const struct EnerfModel *model,
                                   size_t view_id,
                                   enum EnerfMode mode,
                                   size_t n_samples,
                                   float *rgb,
                                   size_t rgb_len,
                                   float *depth,
                                   size_t depth_len);

/**
 * Renders an arbitrary world-to-camera pose `x_cam = R·x + t` with
 * intrinsics `k`; matrices are row-major.
 *
 * # Safety
 * As [`enerf_render_view`]; `k` and `r` point to 9 doubles, `t` to 3.
 */
enum EnerfStatus enerf_render_pose(const struct EnerfDataset *ds,
                                   const struct EnerfModel *model,
                                   const double *k,
                                   const double *r,
                                   const double *t,
                                   size_t width,
                                   size_t height,
                                   enum EnerfMode mode,
                                   size_t n_samples,
                                   float *rgb,
                                   size_t rgb_len,
                                   float *depth,
                                   size_t depth_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENERF_H */
