#ifndef WECOLORA_H
#define WECOLORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 2-4 match the CLI exit codes.
 */
typedef enum WclStatus {
  WCL_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or a too-small output buffer.
   */
  WCL_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Configuration, contract or dimension error.
   */
  WCL_STATUS_CONFIG = 2,
  /**
   * Format, corruption, parse or I/O error.
   */
  WCL_STATUS_FORMAT = 3,
  /**
   * Non-finite values during training.
   */
  WCL_STATUS_NUMERIC = 4,
  /**
   * A panic was caught at the boundary.
   */
  WCL_STATUS_INTERNAL = 5,
} WclStatus;

/**
 * Opaque model handle.
 */
typedef struct WclModel WclModel;

/**
 * Model geometry reported by [`wcl_model_dims`].
 */
typedef struct WclDims {
  size_t image_size;
  size_t channels;
  size_t dim;
  size_t depth;
  size_t tokens;
  bool has_adapters;
} WclDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *wcl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wcl_version(void);

/**
 * Randomly initialized model from a JSON ViT config (missing fields take
 * defaults; null or empty means all defaults).
 *
 * # Safety
 * `config_json` must be null or a NUL-terminated string; `out` must be
 * writable.
 */
enum WclStatus wcl_model_init(const char *config_json, uint64_t seed, struct WclModel **out);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WclStatus wcl_model_load(const char *path, struct WclModel **out);

/**
 * Saves a checkpoint. Unmerged adapters are stored as separate tensors.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum WclStatus wcl_model_save(const struct WclModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void wcl_model_free(struct WclModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum WclStatus wcl_model_dims(const struct WclModel *model, struct WclDims *out);

/**
 * Final-norm features of one image, `tokens×dim` values in row-major order
 * (row 0 is CLS). `out_len` must be at least `tokens·dim`.
 *
 * # Safety
 * `pixels` must hold `channels·size·size` floats; `out` must hold `out_len`.
 */
enum WclStatus wcl_model_features(const struct WclModel *model,
                                  const float *pixels,
                                  float *out,
                                  size_t out_len);

/**
 * Distills a student from `teacher` on `count` unlabeled images. The
 * settings are a JSON distillation config; null or empty uses defaults.
 * The returned student has its adapters merged.
 *
 * # Safety
 * `pixels` must hold `count` images; `out` must be writable.
 */
enum WclStatus wcl_distill(const struct WclModel *teacher,
                           const float *pixels,
                           size_t count,
                           const char *config_json,
                           struct WclModel **out);

/**
 * Folds attached adapters into the base weights in place.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum WclStatus wcl_model_merge(struct WclModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WECOLORA_H */
