#ifndef DIRECTCAPS_H
#define DIRECTCAPS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_SHAPE = 3,
  DC_STATUS_IO = 4,
  DC_STATUS_CORRUPT = 5,
  DC_STATUS_NUMERIC = 6,
  DC_STATUS_PANIC = 7,
} DcStatus;

// Loaded model; create with [`dc_model_load`], release with [`dc_model_free`].
typedef struct DcModel DcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dc_version(void);

// Message for the last failed call on this thread, or null if it
// succeeded. Valid until the next call into this library on the same
// thread.
const char *dc_last_error(void);

// Loads the model stored in a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum DcStatus dc_model_load(const char *path, struct DcModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`dc_model_load`] and not be used afterwards.
void dc_model_free(struct DcModel *model);

// Writes the class count and the expected `channels x height x width`
// input geometry. Any output pointer may be null.
//
// # Safety
// `model` must be a live handle; non-null outputs must be writable.
enum DcStatus dc_model_info(const struct DcModel *model,
                            size_t *num_classes,
                            size_t *channels,
                            size_t *height,
                            size_t *width);

// Scores `count` images laid out as `[count, C, H, W]` with values in
// `[0, 1]`. Writes `count * num_classes` capsule lengths to `scores`.
// Low-resolution probes must be upsampled to the model size first, for
// example with [`dc_bicubic_resize`].
//
// # Safety
// `pixels` must hold `pixels_len` floats and `scores` `scores_len` floats.
enum DcStatus dc_model_predict(struct DcModel *model,
                               const float *pixels,
                               size_t pixels_len,
                               size_t count,
                               float *scores,
                               size_t scores_len);

// Bicubic resize of a planar `[C, H, W]` image, as used to build
// low-resolution probes and to upsample them again.
//
// # Safety
// `src` must hold `channels * height * width` floats and `dst`
// `channels * out_height * out_width` floats.
enum DcStatus dc_bicubic_resize(const float *src,
                                size_t channels,
                                size_t height,
                                size_t width,
                                float *dst,
                                size_t out_height,
                                size_t out_width);

// Continuity-corrected McNemar test on the discordant counts `b` and `c`.
// Fails with `InvalidArgument` when `b + c == 0`.
//
// # Safety
// Non-null outputs must be writable.
enum DcStatus dc_mcnemar(uint64_t b, uint64_t c, double *statistic, bool *significant);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIRECTCAPS_H */
