#ifndef PROMPT_SID_H
#define PROMPT_SID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum PsidStatus {
  PSID_STATUS_OK = 0,
  PSID_STATUS_NULL_POINTER = 1,
  PSID_STATUS_INVALID_ARGUMENT = 2,
  PSID_STATUS_SHAPE = 3,
  PSID_STATUS_IO = 4,
  PSID_STATUS_FORMAT = 5,
  PSID_STATUS_CHECKPOINT = 6,
  PSID_STATUS_NON_FINITE = 7,
  PSID_STATUS_PANIC = 8,
} PsidStatus;

/**
 * Opaque image handle (`h × w × c` floats, row-major, channel-last).
 */
typedef struct PsidImage PsidImage;

/**
 * Opaque handle to a trained model loaded from a checkpoint.
 */
typedef struct PsidModel PsidModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *psid_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *psid_version(void);

/**
 * Copies `h·w·c` floats from `data` into a new image.
 *
 * # Safety
 * `data` must point to `h·w·c` readable floats; `out` must be writable.
 */
enum PsidStatus psid_image_new(uint32_t h,
                               uint32_t w,
                               uint32_t c,
                               const float *data,
                               struct PsidImage **out);

/**
 * Loads a PNG (8-bit gray/RGB) or PSID file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PsidStatus psid_image_load(const char *path, struct PsidImage **out);

/**
 * Writes `.psid` losslessly, anything else as PNG.
 *
 * # Safety
 * `img` must be a live handle; `path` a NUL-terminated string.
 */
enum PsidStatus psid_image_save(const struct PsidImage *img, const char *path);

/**
 * # Safety
 * `img` must be null or a handle not yet freed.
 */
void psid_image_free(struct PsidImage *img);

/**
 * # Safety
 * `img` must be a live handle; the out pointers writable.
 */
enum PsidStatus psid_image_dims(const struct PsidImage *img, uint32_t *h, uint32_t *w, uint32_t *c);

/**
 * Pointer to the image's `h·w·c` floats, valid while the handle lives.
 * Null for a null handle.
 *
 * # Safety
 * `img` must be null or a live handle.
 */
const float *psid_image_data(const struct PsidImage *img);

/**
 * Adds noise described by `spec` (`gaussian:25`, `poisson:30`, ...).
 *
 * # Safety
 * `img` must be a live handle; `spec` NUL-terminated; `out` writable.
 */
enum PsidStatus psid_add_noise(const struct PsidImage *img,
                               const char *spec,
                               uint64_t seed,
                               struct PsidImage **out);

/**
 * Loads a training checkpoint for inference.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum PsidStatus psid_model_load(const char *path, struct PsidModel **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void psid_model_free(struct PsidModel *model);

/**
 * Channel count the model expects.
 *
 * # Safety
 * `model` must be a live handle; `channels` writable.
 */
enum PsidStatus psid_model_channels(const struct PsidModel *model, uint32_t *channels);

/**
 * Denoises `img` with the EMA weights; `seed` fixes the diffusion start.
 *
 * # Safety
 * `model` and `img` must be live handles; `out` writable.
 */
enum PsidStatus psid_model_denoise(const struct PsidModel *model,
                                   const struct PsidImage *img,
                                   uint64_t seed,
                                   struct PsidImage **out);

/**
 * PSNR in dB; `+inf` for identical images.
 *
 * # Safety
 * `a`, `b` must be live handles; `out` writable.
 */
enum PsidStatus psid_psnr(const struct PsidImage *a,
                          const struct PsidImage *b,
                          double peak,
                          double *out);

/**
 * Mean SSIM (11×11 Gaussian window, unit peak).
 *
 * # Safety
 * `a`, `b` must be live handles; `out` writable.
 */
enum PsidStatus psid_ssim(const struct PsidImage *a, const struct PsidImage *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMPT_SID_H */
