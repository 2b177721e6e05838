#ifndef STYLECL_H
#define STYLECL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StyleclStatus {
  STYLECL_STATUS_OK = 0,
  STYLECL_STATUS_NULL_POINTER = 1,
  STYLECL_STATUS_INVALID_ARGUMENT = 2,
  STYLECL_STATUS_SHAPE = 3,
  STYLECL_STATUS_IO = 4,
  STYLECL_STATUS_FORMAT = 5,
  STYLECL_STATUS_PROTOCOL = 6,
  STYLECL_STATUS_DIVISION = 7,
  STYLECL_STATUS_INTERNAL = 8,
} StyleclStatus;

/**
 * Opaque style bank.
 */
typedef struct StyleclBank StyleclBank;

/**
 * Opaque segmentation model loaded from a checkpoint.
 */
typedef struct StyleclModel StyleclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *stylecl_last_error(void);

/**
 * Library version as a static string.
 */
const char *stylecl_version(void);

/**
 * Relative gap `(oracle - miou) / oracle` in percent.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum StyleclStatus stylecl_delta(double miou, double oracle_miou, double *out);

/**
 * Mean of `len` gaps.
 *
 * # Safety
 * `deltas` must point to `len` readable doubles; `out` must be writable.
 */
enum StyleclStatus stylecl_delta_bar(const double *deltas, size_t len, double *out);

/**
 * Creates an empty bank for `h x w` images.
 *
 * # Safety
 * `out` must be valid for writes. Free the result with [`stylecl_bank_free`].
 */
enum StyleclStatus stylecl_bank_new(size_t h, size_t w, double beta, struct StyleclBank **out);

/**
 * Loads a bank file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum StyleclStatus stylecl_bank_load(const char *path, struct StyleclBank **out);

/**
 * # Safety
 * `bank` and `path` must be valid.
 */
enum StyleclStatus stylecl_bank_save(const struct StyleclBank *bank, const char *path);

/**
 * Extracts the mean style of `count` images and appends it as the next
 * step.
 *
 * # Safety
 * `images` must hold `count * h * w * 3` floats, `h x w` matching the bank.
 */
enum StyleclStatus stylecl_bank_add_style(struct StyleclBank *bank,
                                          const float *images,
                                          size_t count);

/**
 * Number of stored styles, or 0 for a null bank.
 *
 * # Safety
 * `bank` must be null or valid.
 */
size_t stylecl_bank_len(const struct StyleclBank *bank);

/**
 * Renders an `h x w` image in style `step`, writing `h * w * 3` floats.
 *
 * # Safety
 * `image` and `out` must each hold `h * w * 3` floats.
 */
enum StyleclStatus stylecl_bank_apply(const struct StyleclBank *bank,
                                      uint32_t step,
                                      const float *image,
                                      size_t h,
                                      size_t w,
                                      float *out);

/**
 * # Safety
 * `bank` must be null or come from this library, and not be used after.
 */
void stylecl_bank_free(struct StyleclBank *bank);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum StyleclStatus stylecl_model_load(const char *path, struct StyleclModel **out);

/**
 * Output channel count, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or valid.
 */
size_t stylecl_model_num_classes(const struct StyleclModel *model);

/**
 * Protocol step the checkpoint was saved at.
 *
 * # Safety
 * `model` must be valid; `out` must be writable.
 */
enum StyleclStatus stylecl_model_step(const struct StyleclModel *model, uint32_t *out);

/**
 * Copies the class id of every output channel into `out` (capacity `cap`).
 *
 * # Safety
 * `out` must hold `cap` bytes.
 */
enum StyleclStatus stylecl_model_layout(const struct StyleclModel *model, uint8_t *out, size_t cap);

/**
 * Writes `h * w * C` logits.
 *
 * # Safety
 * `image` must hold `h * w * 3` floats and `logits` `cap` floats.
 */
enum StyleclStatus stylecl_model_forward(const struct StyleclModel *model,
                                         const float *image,
                                         size_t h,
                                         size_t w,
                                         float *logits,
                                         size_t cap);

/**
 * Writes the predicted class id of each of the `h * w` pixels.
 *
 * # Safety
 * `image` must hold `h * w * 3` floats and `labels` `h * w` bytes.
 */
enum StyleclStatus stylecl_model_predict(const struct StyleclModel *model,
                                         const float *image,
                                         size_t h,
                                         size_t w,
                                         uint8_t *labels);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used after.
 */
void stylecl_model_free(struct StyleclModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLECL_H */
