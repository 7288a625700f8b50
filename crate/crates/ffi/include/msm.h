#ifndef MSM_H
#define MSM_H

#pragma once

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsmStatus {
  MSM_STATUS_OK = 0,
  MSM_STATUS_NULL_POINTER = 1,
  MSM_STATUS_INVALID_ARGUMENT = 2,
  MSM_STATUS_DIMENSION_MISMATCH = 3,
  MSM_STATUS_DECODE = 4,
  MSM_STATUS_CHECKPOINT = 5,
  MSM_STATUS_EMPTY_PREFERRED_SET = 6,
  MSM_STATUS_IO = 7,
  MSM_STATUS_CONFIG = 8,
  MSM_STATUS_BUFFER_TOO_SMALL = 9,
  MSM_STATUS_PANIC = 10,
  MSM_STATUS_INTERNAL = 11,
} MsmStatus;

typedef enum MsmMethod {
  MSM_METHOD_MASKED = 0,
  MSM_METHOD_AVERAGE = 1,
  MSM_METHOD_WEIGHTED = 2,
} MsmMethod;

/**
 * Opaque trained model.
 */
typedef struct MsmModel MsmModel;

/**
 * Opaque preferred-pair session bound to a model.
 */
typedef struct MsmSession MsmSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *msm_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on this thread.
 */
const char *msm_last_error_message(void);

/**
 * Loads an msm-v1 checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsmStatus msm_model_load(const char *path, struct MsmModel **out);

/**
 * Loads an msm-v1 checkpoint from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum MsmStatus msm_model_from_bytes(const uint8_t *data, uintptr_t len, struct MsmModel **out);

/**
 * Untrained model with the given square working size and seed; for tests
 * and plumbing checks.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MsmStatus msm_model_new_untrained(uintptr_t image_size, uint64_t seed, struct MsmModel **out);

/**
 * Side length preferred pairs are resized to.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uintptr_t msm_model_image_size(const struct MsmModel *model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed. Sessions created from it
 * stay valid.
 */
void msm_model_free(struct MsmModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum MsmStatus msm_session_new(const struct MsmModel *model, struct MsmSession **out);

/**
 * # Safety
 * `session` must be NULL or a handle not yet freed.
 */
void msm_session_free(struct MsmSession *session);

/**
 * Number of preferred pairs held.
 *
 * # Safety
 * `session` must be NULL or a live handle.
 */
uintptr_t msm_session_len(const struct MsmSession *session);

/**
 * Appends a preferred pair; both images share `height x width` and are
 * resized to the model's working size. `out_count` may be NULL.
 *
 * # Safety
 * Image pointers must hold `height * width * 3` doubles.
 */
enum MsmStatus msm_session_add_pair(struct MsmSession *session,
                                    const double *original,
                                    const double *retouched,
                                    uintptr_t height,
                                    uintptr_t width,
                                    uintptr_t *out_count);

/**
 * Removes the pair at `index`. `out_count` may be NULL.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum MsmStatus msm_session_remove_pair(struct MsmSession *session,
                                       uintptr_t index,
                                       uintptr_t *out_count);

/**
 * Personalizes one image. `out_pixels` receives `height * width * 3`
 * doubles. For the masked method the per-pair attention is written to
 * `out_attention` (capacity `attention_cap`, may be NULL when 0) and its
 * length to `out_attention_len`; other methods report length 0.
 *
 * # Safety
 * All non-NULL pointers must be valid for the stated lengths.
 */
enum MsmStatus msm_session_enhance(const struct MsmSession *session,
                                   enum MsmMethod method,
                                   const double *unseen,
                                   uintptr_t height,
                                   uintptr_t width,
                                   double *out_pixels,
                                   double *out_attention,
                                   uintptr_t attention_cap,
                                   uintptr_t *out_attention_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSM_H */
