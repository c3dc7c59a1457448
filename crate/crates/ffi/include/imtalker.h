#ifndef IMTALKER_H
#define IMTALKER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values match the CLI exit codes where
 * the meaning overlaps.
 */
typedef enum {
  IMTK_STATUS_OK = 0,
  IMTK_STATUS_RUNTIME = 1,
  IMTK_STATUS_CONFIG = 2,
  IMTK_STATUS_MISSING_ARTIFACT = 3,
  IMTK_STATUS_SHAPE = 4,
  /**
   * Null pointer, non-UTF-8 path or bad length.
   */
  IMTK_STATUS_INVALID_ARGUMENT = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  IMTK_STATUS_PANIC = 6,
} ImtkStatus;

/**
 * Motion generator with loaded weights.
 */
typedef struct ImtkGenerator ImtkGenerator;

/**
 * Renderer with loaded weights.
 */
typedef struct ImtkRenderer ImtkRenderer;

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *imtk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *imtk_version(void);

/**
 * Loads a renderer from a run config (JSON) and a renderer checkpoint.
 *
 * # Safety
 * `config_path` and `checkpoint_path` must be NUL-terminated strings and
 * `out` a valid pointer to write the handle to.
 */
ImtkStatus imtk_renderer_open(const char *config_path,
                              const char *checkpoint_path,
                              ImtkRenderer **out);

/**
 * # Safety
 * `h` must be null or a handle from [`imtk_renderer_open`] not yet freed.
 */
void imtk_renderer_free(ImtkRenderer *h);

/**
 * Input side length R; inputs hold `3 * R * R` values.
 *
 * # Safety
 * `h` must be a live renderer handle.
 */
size_t imtk_renderer_input_res(const ImtkRenderer *h);

/**
 * Output side length; outputs hold `3 * R_out * R_out` values.
 *
 * # Safety
 * `h` must be a live renderer handle.
 */
size_t imtk_renderer_output_res(const ImtkRenderer *h);

/**
 * Motion latent size.
 *
 * # Safety
 * `h` must be a live renderer handle.
 */
size_t imtk_renderer_latent_dim(const ImtkRenderer *h);

/**
 * Renders `source` with the motion of `driving`. Both inputs hold
 * `3 * R * R` values; `out_len` must be `3 * R_out * R_out`.
 *
 * # Safety
 * `h` must be a live handle and the buffers must hold the stated number
 * of values.
 */
ImtkStatus imtk_renderer_render(const ImtkRenderer *h,
                                const float *source,
                                const float *driving,
                                float *out,
                                size_t out_len);

/**
 * Renders `source` with a motion latent of `latent_len = d_z` values.
 *
 * # Safety
 * As for [`imtk_renderer_render`].
 */
ImtkStatus imtk_renderer_render_latent(const ImtkRenderer *h,
                                       const float *source,
                                       const float *latent,
                                       size_t latent_len,
                                       float *out,
                                       size_t out_len);

/**
 * Loads a motion generator from a run config and a generator checkpoint.
 *
 * # Safety
 * As for [`imtk_renderer_open`].
 */
ImtkStatus imtk_generator_open(const char *config_path,
                               const char *checkpoint_path,
                               ImtkGenerator **out);

/**
 * # Safety
 * `h` must be null or a handle from [`imtk_generator_open`] not yet freed.
 */
void imtk_generator_free(ImtkGenerator *h);

/**
 * Writes the per-frame widths of the audio, pose and gaze conditions and
 * of the output latent. Any pointer may be null.
 *
 * # Safety
 * `h` must be a live generator handle; non-null pointers must be writable.
 */
ImtkStatus imtk_generator_dims(const ImtkGenerator *h,
                               size_t *audio_dim,
                               size_t *pose_dim,
                               size_t *gaze_dim,
                               size_t *latent_dim);

/**
 * Samples a `[len, d_z]` motion sequence with `steps` Euler steps and
 * guidance scale `guidance`. Conditions are row-major `[len, dim]`.
 *
 * # Safety
 * `h` must be a live handle and every buffer must hold `len` rows of its
 * width; `out_len` must be `len * d_z`.
 */
ImtkStatus imtk_generator_sample(const ImtkGenerator *h,
                                 const float *audio,
                                 const float *pose,
                                 const float *gaze,
                                 size_t len,
                                 size_t steps,
                                 double guidance,
                                 uint64_t seed,
                                 float *out,
                                 size_t out_len);

/**
 * PSNR in dB between two `[channels, height, width]` images with peak
 * value `max_val`; identical images give the 100 dB cap.
 *
 * # Safety
 * `a` and `b` must hold `channels * height * width` values; `out` must be
 * writable.
 */
ImtkStatus imtk_psnr(const float *a,
                     const float *b,
                     size_t channels,
                     size_t height,
                     size_t width,
                     double max_val,
                     double *out);

/**
 * SSIM between two `[channels, height, width]` images in `[0, 1]`.
 *
 * # Safety
 * As for [`imtk_psnr`].
 */
ImtkStatus imtk_ssim(const float *a,
                     const float *b,
                     size_t channels,
                     size_t height,
                     size_t width,
                     double *out);

#endif  /* IMTALKER_H */
