#ifndef DIFFCAP_H
#define DIFFCAP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_INVALID_ARGUMENT = 1,
  DC_STATUS_OUT_OF_RANGE = 2,
  DC_STATUS_SHAPE_MISMATCH = 3,
  DC_STATUS_NON_FINITE = 4,
  DC_STATUS_IO = 5,
  DC_STATUS_FORMAT = 6,
  DC_STATUS_NULL_POINTER = 7,
  DC_STATUS_PANIC = 8,
} DcStatus;

/**
 * A loaded checkpoint.
 */
typedef struct DcModel DcModel;

/**
 * A noise schedule, possibly respaced.
 */
typedef struct DcSchedule DcSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next library call on this thread; do not free.
 */
const char *dc_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void dc_string_free(char *s);

/**
 * Builds a schedule. `kind` is "sqrt", "linear" or "cosine".
 *
 * # Safety
 * `kind` must be a NUL-terminated string; `out` must be writable.
 */
enum DcStatus dc_schedule_new(const char *kind, size_t steps, struct DcSchedule **out);

/**
 * Respaces `schedule` to `k` steps into a new handle.
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
enum DcStatus dc_schedule_respace(const struct DcSchedule *schedule,
                                  size_t k,
                                  struct DcSchedule **out);

/**
 * Number of steps, or 0 for a null handle.
 *
 * # Safety
 * `schedule` must be null or a live handle.
 */
size_t dc_schedule_steps(const struct DcSchedule *schedule);

/**
 * Cumulative signal level at step `t` (0..=steps).
 *
 * # Safety
 * `schedule` must be a live handle; `out` must be writable.
 */
enum DcStatus dc_schedule_alpha_bar(const struct DcSchedule *schedule, size_t t, double *out);

/**
 * Posterior coefficients at step `t`: mean = c_xt * x_t + c_x0 * x_0.
 *
 * # Safety
 * `schedule` must be a live handle; the three out-pointers must be writable.
 */
enum DcStatus dc_schedule_posterior(const struct DcSchedule *schedule,
                                    size_t t,
                                    double *c_xt,
                                    double *c_x0,
                                    double *var);

/**
 * # Safety
 * `schedule` must be null or a live handle, and is dangling afterwards.
 */
void dc_schedule_free(struct DcSchedule *schedule);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum DcStatus dc_model_load(const char *dir, struct DcModel **out);

/**
 * Captions one shape. `views_json` is a JSON array of views, each an array of
 * `{"part","color","material","texture"}` cells forming a square grid.
 * `pooling` is "max", "mean" or "stochastic"; `inference_steps` 0 means the
 * full training schedule. The caption is written to `out` and must be
 * released with [`dc_string_free`].
 *
 * # Safety
 * `model` must be a live handle; the strings NUL-terminated; `out` writable.
 */
enum DcStatus dc_model_caption(const struct DcModel *model,
                               const char *views_json,
                               size_t samples,
                               const char *pooling,
                               size_t inference_steps,
                               uint64_t seed,
                               char **out);

/**
 * # Safety
 * `model` must be null or a live handle, and is dangling afterwards.
 */
void dc_model_free(struct DcModel *model);

/**
 * Smoothed sentence BLEU-`max_n` of whitespace-tokenized strings.
 *
 * # Safety
 * `candidate` and the `n_refs` entries of `references` must be
 * NUL-terminated strings; `out` must be writable.
 */
enum DcStatus dc_bleu(const char *candidate,
                      const char *const *references,
                      size_t n_refs,
                      size_t max_n,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFCAP_H */
