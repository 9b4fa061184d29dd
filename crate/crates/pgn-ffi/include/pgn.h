#ifndef PGN_H
#define PGN_H

/* Generated by cbindgen from the pgn-ffi crate; regenerate with `cbindgen --crate pgn-ffi --output include/pgn.h`. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum PgnStatus {
  PGN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PGN_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments were structurally invalid (shapes, sizes, modes).
   */
  PGN_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The operation itself failed (I/O, malformed checkpoint).
   */
  PGN_STATUS_FAILED = 3,
  /**
   * A panic was caught at the boundary.
   */
  PGN_STATUS_INTERNAL = 4,
} PgnStatus;

/**
 * Opaque model handle (backbone + head).
 */
typedef struct PgnModelHandle PgnModelHandle;

/**
 * Opaque teacher handle.
 */
typedef struct PgnTeacher PgnTeacher;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pgn_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *pgn_version(void);

/**
 * Builds the desk-scale teacher with seeded frozen weights.
 *
 * # Safety
 * `out` must be a valid pointer; the handle must be released with
 * `pgn_teacher_destroy`.
 */
enum PgnStatus pgn_teacher_create_tiny(uint64_t seed, struct PgnTeacher **out);

/**
 * Releases a teacher handle; a null pointer is ignored.
 *
 * # Safety
 * `teacher` must have come from `pgn_teacher_create_tiny` and must not be
 * used afterwards.
 */
void pgn_teacher_destroy(struct PgnTeacher *teacher);

/**
 * Per-image perceptual loss of `batch` image pairs of size `3 x h x w`.
 * `out_loss` receives `batch` values.
 *
 * # Safety
 * `yhat` and `y` must hold `batch*3*h*w` floats; `out_loss` must hold
 * `batch` floats.
 */
enum PgnStatus pgn_teacher_loss(const struct PgnTeacher *teacher,
                                const float *yhat,
                                const float *y,
                                size_t batch,
                                size_t h,
                                size_t w,
                                float *out_loss);

/**
 * Exact gradient of the summed per-image perceptual loss with respect to
 * `yhat`; `out_grad` receives `batch*3*h*w` values.
 *
 * # Safety
 * Buffer sizes as in `pgn_teacher_loss`; `out_grad` must hold
 * `batch*3*h*w` floats.
 */
enum PgnStatus pgn_teacher_grad(const struct PgnTeacher *teacher,
                                const float *yhat,
                                const float *y,
                                size_t batch,
                                size_t h,
                                size_t w,
                                float *out_grad);

/**
 * Loads a PGN checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; the handle must be released
 * with `pgn_model_destroy`.
 */
enum PgnStatus pgn_model_load(const char *path, struct PgnModelHandle **out);

/**
 * Releases a model handle; a null pointer is ignored.
 *
 * # Safety
 * `model` must have come from `pgn_model_load` and must not be used
 * afterwards.
 */
void pgn_model_destroy(struct PgnModelHandle *model);

/**
 * One forward pass: writes the synthetic gradient to `out_grad`
 * (`batch*3*h*w` floats) and, when `out_proxy` is non-null and the head
 * produces one, the proxy target too. For the direct head `out_proxy` is
 * left untouched and `has_proxy` (when non-null) is set to 0.
 *
 * # Safety
 * All buffers must hold `batch*3*h*w` floats; `h` and `w` must be
 * divisible by the backbone's spatial divisor (stored in the checkpoint).
 */
enum PgnStatus pgn_model_synthesize(const struct PgnModelHandle *model,
                                    const float *yhat,
                                    const float *y,
                                    size_t batch,
                                    size_t h,
                                    size_t w,
                                    float *out_grad,
                                    float *out_proxy,
                                    int32_t *has_proxy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGN_H */
