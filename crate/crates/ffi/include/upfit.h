#ifndef UPFIT_H
#define UPFIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UpfitStatus {
  UPFIT_STATUS_OK = 0,
  UPFIT_STATUS_NULL_POINTER = 1,
  UPFIT_STATUS_INVALID_ARGUMENT = 2,
  UPFIT_STATUS_IO = 3,
  UPFIT_STATUS_FORMAT = 4,
  UPFIT_STATUS_FIT = 5,
  UPFIT_STATUS_PANIC = 6,
} UpfitStatus;

/**
 * A trained direct-prediction model.
 */
typedef struct UpfitDpModel UpfitDpModel;

/**
 * A body model.
 */
typedef struct UpfitModel UpfitModel;

typedef struct UpfitModelDims {
  size_t n_joints;
  size_t n_shape;
  size_t n_params;
  size_t n_landmarks;
  size_t n_parts;
} UpfitModelDims;

/**
 * Pinhole camera; x right, y down, z forward.
 */
typedef struct UpfitCamera {
  double focal;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} UpfitCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *upfit_last_error(void);

/**
 * Library version as a static string.
 */
const char *upfit_version(void);

/**
 * Creates a handle on the built-in mini body model.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum UpfitStatus upfit_model_mini(struct UpfitModel **out);

/**
 * Loads a body model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum UpfitStatus upfit_model_load(const char *path, struct UpfitModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from `upfit_model_*` and not be used afterwards.
 */
void upfit_model_free(struct UpfitModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum UpfitStatus upfit_model_dims(const struct UpfitModel *model, struct UpfitModelDims *out);

/**
 * Fits the model to 2D keypoints of the named keypoint set.
 *
 * `points` holds `2 * n_points` pixel coordinates (x, y); `confidence`
 * holds `n_points` weights or is null for all ones. `silhouette` is null or
 * `width * height` bytes, nonzero inside the person. `config_json` is null
 * for defaults. Writes `n_params` values to `out_params` and the final
 * objective to `out_energy` when it is not null.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; strings NUL-terminated.
 */
enum UpfitStatus upfit_fit(const struct UpfitModel *model,
                           const struct UpfitCamera *cam,
                           const char *keypoint_set,
                           const double *points,
                           const double *confidence,
                           size_t n_points,
                           const uint8_t *silhouette,
                           const char *config_json,
                           double *out_params,
                           size_t n_params,
                           double *out_energy);

/**
 * Renders the part mask of a configuration: part index + 1 per pixel, 0
 * for background, row-major `width * height` bytes.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum UpfitStatus upfit_render_parts(const struct UpfitModel *model,
                                    const struct UpfitCamera *cam,
                                    const double *params,
                                    size_t n_params,
                                    uint8_t *out_mask,
                                    size_t mask_len);

/**
 * Projects the surface landmarks of a configuration: `2 * n_landmarks`
 * pixel coordinates.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum UpfitStatus upfit_project_landmarks(const struct UpfitModel *model,
                                         const struct UpfitCamera *cam,
                                         const double *params,
                                         size_t n_params,
                                         double *out_points,
                                         size_t points_len);

/**
 * Loads a direct-prediction model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum UpfitStatus upfit_dp_load(const char *path, struct UpfitDpModel **out);

/**
 * Releases a direct-prediction handle; null is ignored.
 *
 * # Safety
 * `dp` must come from `upfit_dp_load` and not be used afterwards.
 */
void upfit_dp_free(struct UpfitDpModel *dp);

/**
 * Predicts a configuration from `n_points` surface landmarks (`2 *
 * n_points` pixel coordinates).
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum UpfitStatus upfit_dp_predict(const struct UpfitDpModel *dp,
                                  const struct UpfitModel *model,
                                  const struct UpfitCamera *cam,
                                  const double *points,
                                  size_t n_points,
                                  double *out_params,
                                  size_t n_params);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UPFIT_H */
