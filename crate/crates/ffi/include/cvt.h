#ifndef CVT_FFI_H
#define CVT_FFI_H

#pragma once

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Built-in scene and model configurations.
 */
typedef enum {
  /**
   * Four cameras at 64×128, 64×64 map.
   */
  CVT_PRESET_DESK = 0,
  /**
   * Two cameras at 8×16, 32×32 map.
   */
  CVT_PRESET_MICRO = 1,
} CvtPreset;

/**
 * Result code of every fallible call.
 */
typedef enum {
  CVT_STATUS_OK = 0,
  CVT_STATUS_NULL_POINTER = 1,
  CVT_STATUS_INVALID_ARGUMENT = 2,
  CVT_STATUS_SHAPE = 3,
  CVT_STATUS_IO = 4,
  CVT_STATUS_FORMAT = 5,
  CVT_STATUS_CONFIG = 6,
  CVT_STATUS_CALIBRATION = 7,
  CVT_STATUS_DEGENERATE = 8,
  CVT_STATUS_CONTRACT = 9,
  CVT_STATUS_GENERATION = 10,
  CVT_STATUS_NON_FINITE_LOSS = 11,
  CVT_STATUS_BUFFER_TOO_SMALL = 12,
  CVT_STATUS_INVALID_UTF8 = 13,
  /**
   * A point projected to or behind the camera plane.
   */
  CVT_STATUS_BEHIND = 14,
  CVT_STATUS_PANIC = 15,
} CvtStatus;

/**
 * A model configuration with its parameters.
 */
typedef struct CvtModel CvtModel;

/**
 * Camera images, calibrations and map-view label of one scene.
 */
typedef struct CvtSample CvtSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *cvt_version(void);

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next failing call on the same thread.
 */
const char *cvt_last_error(void);

/**
 * Freshly initialized model of `preset` with parameters drawn from `seed`.
 */
CvtStatus cvt_model_init(CvtPreset preset, uint64_t seed, CvtModel **out);

/**
 * Loads a checkpoint directory written by `cvt train`.
 */
CvtStatus cvt_model_load(const char *dir, CvtModel **out);

/**
 * Writes the model as a checkpoint without optimizer state.
 */
CvtStatus cvt_model_save(const CvtModel *model, const char *dir);

/**
 * Releases a model. Null is ignored.
 */
void cvt_model_free(CvtModel *model);

/**
 * Logit tensor shape `channels × height × width` produced by [`cvt_predict`].
 */
CvtStatus cvt_model_output_shape(const CvtModel *model,
                                 size_t *channels,
                                 size_t *height,
                                 size_t *width);

/**
 * Generates and renders one scene of `preset`.
 */
CvtStatus cvt_sample_generate(CvtPreset preset, uint64_t seed, CvtSample **out);

/**
 * Reads one sample directory (`manifest.json` plus BT1 tensors).
 */
CvtStatus cvt_sample_read(const char *dir, CvtSample **out);

CvtStatus cvt_sample_write(const CvtSample *sample, const char *dir);

/**
 * Releases a sample. Null is ignored.
 */
void cvt_sample_free(CvtSample *sample);

/**
 * Number of cameras in the sample, or 0 for a null handle.
 */
size_t cvt_sample_num_cameras(const CvtSample *sample);

/**
 * Copies the `C×h×w` label (0 or 1 per cell) into `out`, which holds `len`
 * floats.
 */
CvtStatus cvt_sample_label(const CvtSample *sample, float *out, size_t len);

/**
 * Map-view logits for `sample` seen through the listed cameras (all of
 * them when `cameras` is null). `out` holds `len` floats in `C×h×w` order.
 */
CvtStatus cvt_predict(const CvtModel *model,
                      const CvtSample *sample,
                      const size_t *cameras,
                      size_t n_cameras,
                      float *out,
                      size_t len);

/**
 * Per-channel IoU of `channels×height×width` logits against a 0/1 target
 * at probability threshold 0.5. An empty union scores 1. `out` receives
 * `channels` values.
 */
CvtStatus cvt_iou(const float *logits,
                  const float *target,
                  size_t channels,
                  size_t height,
                  size_t width,
                  double *out);

/**
 * Projects world point `x` through intrinsics `k` and rotation `r` (both
 * row-major 3×3) of a camera at `t`. Writes the pixel to `uv`; returns
 * `CVT_STATUS_BEHIND` for points not in front of the camera.
 */
CvtStatus cvt_project_point(const double *k,
                            const double *r,
                            const double *t,
                            const double *x,
                            double *uv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CVT_FFI_H */
