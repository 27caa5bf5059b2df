#ifndef MVGS_H
#define MVGS_H

/* Generated by cbindgen from the mvgs-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible API call.
 */
typedef enum MvgsStatus {
  /**
   * The call succeeded.
   */
  MVGS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MVGS_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument value was out of range or inconsistent.
   */
  MVGS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Reading or writing a file failed.
   */
  MVGS_STATUS_IO = 3,
  /**
   * The computation itself failed (non-finite values, tolerances).
   */
  MVGS_STATUS_FAILED = 4,
  /**
   * A panic was caught at the FFI boundary.
   */
  MVGS_STATUS_PANIC = 5,
} MvgsStatus;

/**
 * Opaque scene handle: gaussians plus the cameras observing them.
 */
typedef struct MvgsScene MvgsScene;

/**
 * Knobs for [`mvgs_train`]; fill via [`mvgs_train_options_default`] first.
 */
typedef struct MvgsTrainOptions {
  uint64_t iterations;
  /**
   * Seeds initialization, batch sampling, and density control.
   */
  uint64_t seed;
  /**
   * Random gaussians to start from.
   */
  size_t init_gaussians;
  /**
   * A [`MvgsLossMode`] value.
   */
  uint32_t loss_mode;
  /**
   * Views per mini-batch; 1 selects single-view batching.
   */
  size_t batch_views;
  /**
   * Pixel budget per multi-view batch; 0 means one full canvas.
   */
  size_t pixels_per_batch;
} MvgsTrainOptions;

/**
 * Outcome of one finite-difference gradient check.
 */
typedef struct MvgsGradcheckResult {
  /**
   * Parameters compared against central differences.
   */
  size_t checked;
  double worst_rel;
  double worst_abs;
  /**
   * Degenerate random scenes discarded before checking.
   */
  uint32_t rejected_draws;
  bool passed;
} MvgsGradcheckResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mvgs_last_error(void);

/**
 * Static name of a status code ("ok", "null_argument", ...).
 */
const char *mvgs_status_name(enum MvgsStatus status);

/**
 * ABI revision; bump on any incompatible change.
 */
uint32_t mvgs_abi_version(void);

/**
 * Flat parameters per gaussian (mean, log scale, quaternion, opacity
 * logit, color).
 */
size_t mvgs_gaussian_param_count(void);

/**
 * Generate a deterministic random scene with an orbit of cameras.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a handle the
 * caller must release with [`mvgs_scene_free`].
 */
enum MvgsStatus mvgs_scene_synthetic(uint64_t seed,
                                     size_t n_gaussians,
                                     size_t n_cameras,
                                     uint32_t width,
                                     uint32_t height,
                                     struct MvgsScene **out);

/**
 * Load a scene file written by [`mvgs_scene_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer; the
 * returned handle must be released with [`mvgs_scene_free`].
 */
enum MvgsStatus mvgs_scene_load(const char *path, struct MvgsScene **out);

/**
 * Write a scene to a text file that round-trips exactly.
 *
 * # Safety
 * `scene` must be a live handle and `path` a NUL-terminated string.
 */
enum MvgsStatus mvgs_scene_save(const struct MvgsScene *scene, const char *path);

/**
 * Release a handle; null is a no-op.
 *
 * # Safety
 * `scene` must have come from this library and not been freed before.
 */
void mvgs_scene_free(struct MvgsScene *scene);

/**
 * Number of gaussians in the scene; 0 for a null handle.
 *
 * # Safety
 * `scene` must be a live handle or null.
 */
size_t mvgs_scene_gaussian_count(const struct MvgsScene *scene);

/**
 * Number of cameras in the scene; 0 for a null handle.
 *
 * # Safety
 * `scene` must be a live handle or null.
 */
size_t mvgs_scene_camera_count(const struct MvgsScene *scene);

/**
 * Pixel dimensions of one camera.
 *
 * # Safety
 * All pointers must be valid; `scene` must be a live handle.
 */
enum MvgsStatus mvgs_scene_camera_size(const struct MvgsScene *scene,
                                       uint32_t view,
                                       uint32_t *width,
                                       uint32_t *height);

/**
 * Copy one gaussian's flat parameters into `params_out`
 * ([`mvgs_gaussian_param_count`] doubles).
 *
 * # Safety
 * `params_out` must hold at least that many doubles.
 */
enum MvgsStatus mvgs_scene_gaussian_params(const struct MvgsScene *scene,
                                           size_t index,
                                           double *params_out);

/**
 * Render one view. `color_out` receives width*height RGB triplets in
 * row-major order (3 doubles per pixel, values in [0, 1]); `depth_out`,
 * if non-null, receives width*height blended depths with background
 * pixels at the camera's far plane.
 *
 * # Safety
 * Buffers must be at least as large as the layout above requires.
 */
enum MvgsStatus mvgs_scene_render(const struct MvgsScene *scene,
                                  uint32_t view,
                                  uint32_t tile_size,
                                  double *color_out,
                                  double *depth_out);

/**
 * Fill `out` with the default training options.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MvgsStatus mvgs_train_options_default(struct MvgsTrainOptions *out);

/**
 * Optimize a fresh set of gaussians against ground-truth images of the
 * scene's cameras. `images` holds camera_count * width * height RGB
 * triplets, views concatenated in camera order. On success `out` receives
 * a new scene handle with the trained gaussians and, if `final_loss` is
 * non-null, the last mini-batch loss is written there.
 *
 * # Safety
 * `images` must hold the full layout above; `out` must be valid; the
 * returned handle must be released with [`mvgs_scene_free`].
 */
enum MvgsStatus mvgs_train(const struct MvgsScene *dataset,
                           const double *images,
                           const struct MvgsTrainOptions *options,
                           double *final_loss,
                           struct MvgsScene **out);

/**
 * Compare analytic gradients on a random scene against central finite
 * differences. A failed comparison still returns `Ok`; inspect
 * `result.passed`.
 *
 * # Safety
 * `result_out` must be a valid pointer.
 */
enum MvgsStatus mvgs_gradcheck(uint64_t seed,
                               size_t n_gaussians,
                               uint32_t size,
                               uint32_t loss,
                               struct MvgsGradcheckResult *result_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVGS_H */
