#ifndef VDL_SURROGATE_H
#define VDL_SURROGATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VdlsStatus {
  VDLS_STATUS_OK = 0,
  VDLS_STATUS_NULL_POINTER = 1,
  VDLS_STATUS_INVALID_ARGUMENT = 2,
  VDLS_STATUS_IO = 3,
  VDLS_STATUS_FORMAT = 4,
  VDLS_STATUS_MISMATCH = 5,
  VDLS_STATUS_MISSING_ARTIFACT = 6,
  VDLS_STATUS_DIVERGED = 7,
  VDLS_STATUS_PANIC = 8,
} VdlsStatus;

/*
 An 8-bit RGB image, row-major, top row first.
 */
typedef struct VdlsImage VdlsImage;

/*
 A loaded surrogate: three autoencoders and three predictors.
 */
typedef struct VdlsSession VdlsSession;

/*
 A fused volume on the ensemble grid, in data units.
 */
typedef struct VdlsVolume VdlsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on this thread.
 */
const char *vdls_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *vdls_version(void);

/*
 Loads the trained surrogate recorded in `run_dir`.

 # Safety
 `run_dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VdlsStatus vdls_session_open(const char *run_dir, struct VdlsSession **out);

/*
 # Safety
 `session` must come from [`vdls_session_open`] or be null.
 */
void vdls_session_free(struct VdlsSession *session);

/*
 # Safety
 `session` and `out` must be valid pointers.
 */
enum VdlsStatus vdls_session_param_count(const struct VdlsSession *session, uintptr_t *out);

/*
 Range of parameter `index`.

 # Safety
 `session`, `lo` and `hi` must be valid pointers.
 */
enum VdlsStatus vdls_session_param_range(const struct VdlsSession *session,
                                         uintptr_t index,
                                         double *lo,
                                         double *hi);

/*
 Predicts and fuses the volume for `params` as seen from `viewpoint`.

 # Safety
 `params` must hold `n_params` values, `viewpoint` three, and `out` be valid.
 */
enum VdlsStatus vdls_session_infer(const struct VdlsSession *session,
                                   const double *params,
                                   uintptr_t n_params,
                                   const double *viewpoint,
                                   struct VdlsVolume **out);

/*
 # Safety
 `volume` must come from [`vdls_session_infer`] or be null.
 */
void vdls_volume_free(struct VdlsVolume *volume);

/*
 Grid extents and a borrowed pointer to the `x`-major values.

 # Safety
 All pointers must be valid; `extents` must have room for three values.
 `data` stays valid until the volume is freed.
 */
enum VdlsStatus vdls_volume_data(const struct VdlsVolume *volume,
                                 uintptr_t *extents,
                                 const float **data,
                                 uintptr_t *len);

/*
 Renders the prediction for `params` from `viewpoint` with the built-in
 high-opacity transfer function. `tf_json` may be null or a JSON
 transfer function.

 # Safety
 `params` must hold `n_params` values, `viewpoint` three; `tf_json` null or
 NUL-terminated; `out` valid.
 */
enum VdlsStatus vdls_session_render(const struct VdlsSession *session,
                                    const double *params,
                                    uintptr_t n_params,
                                    const double *viewpoint,
                                    const char *tf_json,
                                    struct VdlsImage **out);

/*
 # Safety
 `image` must come from [`vdls_session_render`] or be null.
 */
void vdls_image_free(struct VdlsImage *image);

/*
 Size and a borrowed pointer to `width * height * 3` RGB bytes.

 # Safety
 All pointers must be valid. `pixels` stays valid until the image is freed.
 */
enum VdlsStatus vdls_image_pixels(const struct VdlsImage *image,
                                  uintptr_t *width,
                                  uintptr_t *height,
                                  const uint8_t **pixels);

/*
 # Safety
 `image` must be valid and `path` NUL-terminated.
 */
enum VdlsStatus vdls_image_write_png(const struct VdlsImage *image, const char *path);

/*
 Sensitivity of parameter `index` at `n` evenly spaced values of its range,
 holding the other parameters at `params`. Writes `n` values to each of
 `values` and `sensitivities`.

 # Safety
 `params` must hold `n_params` values; `values` and `sensitivities` must
 have room for `n` values each.
 */
enum VdlsStatus vdls_session_sensitivity(const struct VdlsSession *session,
                                         const double *params,
                                         uintptr_t n_params,
                                         uintptr_t index,
                                         uintptr_t n,
                                         double *values,
                                         double *sensitivities);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VDL_SURROGATE_H */
