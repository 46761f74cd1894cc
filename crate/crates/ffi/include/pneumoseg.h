#ifndef PNEUMOSEG_H
#define PNEUMOSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum PsStatus {
  PS_OK = 0,
  // A required pointer argument was null.
  PS_ERR_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  PS_ERR_INVALID_STRING = 2,
  PS_ERR_IO = 3,
  PS_ERR_FORMAT = 4,
  PS_ERR_DATA = 5,
  PS_ERR_NUMERIC = 6,
  PS_ERR_CONFIG = 7,
  // A caller-supplied buffer is too small.
  PS_ERR_BUFFER_TOO_SMALL = 8,
  // Internal fault; the library caught a panic.
  PS_ERR_INTERNAL = 9,
} PsStatus;

// Label mask (0 background, 1 GGO, 2 high-opacity).
typedef struct PsMask PsMask;

// Trained segmentation model.
typedef struct PsModel PsModel;

// CT volume in Hounsfield units.
typedef struct PsVolume PsVolume;

// Lesion volumes in millilitres. `burden_pct` and `lung_ml` are valid only
// when `has_lung` is non-zero.
typedef struct PsQuantReport {
  double ggo_ml;
  double high_opacity_ml;
  double total_pneumonia_ml;
  double lung_ml;
  double burden_pct;
  int32_t has_lung;
} PsQuantReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failed call on this thread; empty after a
// success. Valid until the next call on the same thread.
const char *ps_last_error(void);

// Library version as a static NUL-terminated string.
const char *ps_version(void);

// Loads a weight file written by the library or its command-line tool.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

// # Safety
// `model` must come from [`ps_model_load`] and not be used afterwards.
void ps_model_free(struct PsModel *model);

// In-plane resolution the model works at, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t ps_model_image_size(const struct PsModel *model);

// Trainable parameter count, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t ps_model_num_params(const struct PsModel *model);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PsStatus ps_volume_load(const char *path, struct PsVolume **out);

// Copies `depth * rows * cols` voxels (z-major, then y, then x) into a new
// volume with spacing in millimetres.
//
// # Safety
// `voxels` must point to `depth * rows * cols` readable values and `out`
// must be writable.
enum PsStatus ps_volume_new(size_t depth,
                            size_t rows,
                            size_t cols,
                            double dz,
                            double dy,
                            double dx,
                            const int16_t *voxels,
                            struct PsVolume **out);

// Writes depth, rows and cols into `shape[0..3]`.
//
// # Safety
// `volume` must be live and `shape` must have room for three values.
enum PsStatus ps_volume_shape(const struct PsVolume *volume, size_t *shape);

// # Safety
// `volume` must come from this library and not be used afterwards.
void ps_volume_free(struct PsVolume *volume);

// Segments `volume`, processing `batch_size` samples per forward pass.
//
// # Safety
// Handles must be live and `out` writable.
enum PsStatus ps_model_predict(const struct PsModel *model,
                               const struct PsVolume *volume,
                               size_t batch_size,
                               struct PsMask **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum PsStatus ps_mask_load(const char *path, struct PsMask **out);

// # Safety
// `mask` must be live and `path` a NUL-terminated string.
enum PsStatus ps_mask_save(const struct PsMask *mask, const char *path);

// Writes depth, rows and cols into `shape[0..3]`.
//
// # Safety
// `mask` must be live and `shape` must have room for three values.
enum PsStatus ps_mask_shape(const struct PsMask *mask, size_t *shape);

// Copies the labels into `buf`, which must hold at least the voxel count.
//
// # Safety
// `mask` must be live and `buf` writable for `len` bytes.
enum PsStatus ps_mask_labels(const struct PsMask *mask, uint8_t *buf, size_t len);

// # Safety
// `mask` must come from this library and not be used afterwards.
void ps_mask_free(struct PsMask *mask);

// Lesion volumes of `mask`. Spacing comes from the mask header unless all
// of `dz`, `dy`, `dx` are positive. `lung` may be null, in which case the
// mask's own lung field (if any) gives the burden.
//
// # Safety
// `mask` must be live, `lung` null or live, and `out` writable.
enum PsStatus ps_quantify(const struct PsMask *mask,
                          const struct PsMask *lung,
                          double dz,
                          double dy,
                          double dx,
                          struct PsQuantReport *out);

// Dice overlap of one class between two masks of equal shape.
//
// # Safety
// Handles must be live and `out` writable.
enum PsStatus ps_dice(const struct PsMask *pred,
                      const struct PsMask *reference,
                      uint8_t class_code,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PNEUMOSEG_H */
