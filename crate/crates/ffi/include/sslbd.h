#ifndef SSLBD_H
#define SSLBD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum SslbdStatus {
  SslbdStatus_Ok = 0,
  /**
   * Invalid configuration or argument values.
   */
  SslbdStatus_ConfigError = 2,
  /**
   * Data or bounds problem (e.g. placement outside the image).
   */
  SslbdStatus_DataError = 3,
  /**
   * A required pointer was null.
   */
  SslbdStatus_NullPointer = 10,
  /**
   * A caller-provided buffer is too small.
   */
  SslbdStatus_BufferTooSmall = 11,
} SslbdStatus;

/**
 * Opaque trigger patch handle.
 */
typedef struct SslbdTrigger SslbdTrigger;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sslbd_version(void);

/**
 * Deterministically generate a trigger patch. The returned handle must be
 * released with `sslbd_trigger_free`.
 */
enum SslbdStatus sslbd_trigger_generate(uint32_t trigger_id,
                                        uint64_t seed,
                                        uint32_t patch_size,
                                        struct SslbdTrigger **out);

/**
 * Side length in pixels of the trigger behind `handle`.
 */
enum SslbdStatus sslbd_trigger_patch_size(const struct SslbdTrigger *handle, uint32_t *out);

/**
 * Copy the trigger's RGB pixels (row-major, 3 bytes per pixel) into `buf`.
 * `len` must be at least `patch_size * patch_size * 3`.
 */
enum SslbdStatus sslbd_trigger_copy_pixels(const struct SslbdTrigger *handle,
                                           uint8_t *buf,
                                           uintptr_t len);

/**
 * Release a trigger handle. Null is ignored.
 */
void sslbd_trigger_free(struct SslbdTrigger *handle);

/**
 * Sample the deterministic placement for `(seed, image_id)` on an image of
 * the given size: uniform over fully-inside positions.
 */
enum SslbdStatus sslbd_sample_location(uint32_t image_w,
                                       uint32_t image_h,
                                       uint32_t patch_size,
                                       uint64_t seed,
                                       const char *image_id,
                                       uint32_t *out_x,
                                       uint32_t *out_y);

/**
 * Paste the trigger into a caller-owned RGB image buffer (row-major HWC,
 * `image_w * image_h * 3` bytes) at `(x, y)`, in place.
 */
enum SslbdStatus sslbd_paste_trigger(uint8_t *image,
                                     uint32_t image_w,
                                     uint32_t image_h,
                                     const struct SslbdTrigger *handle,
                                     uint32_t x,
                                     uint32_t y);

/**
 * Contrastive loss of a unit query against a unit positive key and
 * `negative_count` unit negatives (row-major `negative_count * dim`).
 */
enum SslbdStatus sslbd_info_nce_loss(const float *q,
                                     const float *k_pos,
                                     const float *negatives,
                                     uintptr_t negative_count,
                                     uintptr_t dim,
                                     double tau,
                                     double *out);

/**
 * KL(p || q) with the documented 1e-12 floor on `q`.
 */
enum SslbdStatus sslbd_kl_divergence(const double *p, const double *q, uintptr_t len, double *out);

/**
 * Softmax distribution of a unit embedding's cosine similarities to
 * `anchor_count` unit anchors (row-major `anchor_count * dim`), divided by
 * `temperature`. Writes `anchor_count` probabilities.
 */
enum SslbdStatus sslbd_similarity_distribution(const float *embedding,
                                               uintptr_t dim,
                                               const float *anchors,
                                               uintptr_t anchor_count,
                                               double temperature,
                                               double *out_probs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSLBD_H */
