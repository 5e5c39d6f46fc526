#ifndef PROTOSEG_H
#define PROTOSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status returned by every fallible call.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PS_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PS_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or argument value.
   */
  PS_STATUS_CONFIG = 3,
  /**
   * Shape or buffer length mismatch.
   */
  PS_STATUS_SHAPE = 4,
  /**
   * Bad input data (labels, volumes, files).
   */
  PS_STATUS_DATA = 5,
  /**
   * Checkpoint missing, corrupt or incompatible.
   */
  PS_STATUS_CHECKPOINT = 6,
  /**
   * Operating-system I/O failure.
   */
  PS_STATUS_IO = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  PS_STATUS_PANIC = 8,
} PsStatus;

/**
 * One multi-modal case with optional labels.
 */
typedef struct PsCase PsCase;

/**
 * Trained or freshly initialised network.
 */
typedef struct PsModel PsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none.
 * Valid until the next failing call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *ps_version(void);

/**
 * Creates a network with default configuration and initialisation `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum PsStatus ps_model_new(uint64_t seed, struct PsModel **out);

/**
 * Loads the network stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` as in [`ps_model_new`].
 */
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void ps_model_free(struct PsModel *model);

/**
 * Number of scalar parameters, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ps_model_parameter_count(const struct PsModel *model);

/**
 * Class probabilities `[4][h][w][d]` (background, NCR/NET, ED, ET) for a
 * normalised 4-modality input. `window` 0 runs the whole volume at once;
 * otherwise a cubic sliding window of that side is used. `tta` averages
 * over the eight flip combinations.
 *
 * # Safety
 * `input` must hold `4*h*w*d` values, `dims` three values and `out`
 * `out_len` writable values.
 */
enum PsStatus ps_model_predict_probs(const struct PsModel *model,
                                     const double *input,
                                     const size_t *dims,
                                     size_t window,
                                     bool tta,
                                     double *out,
                                     size_t out_len);

/**
 * Raw label map {0, 1, 2, 4} of the argmax prediction; see
 * [`ps_model_predict_probs`] for the arguments.
 *
 * # Safety
 * As for [`ps_model_predict_probs`], with `out` holding `h*w*d` bytes.
 */
enum PsStatus ps_model_segment(const struct PsModel *model,
                               const double *input,
                               const size_t *dims,
                               size_t window,
                               bool tta,
                               uint8_t *out,
                               size_t out_len);

/**
 * Generates synthetic phantom `index` of the dataset with `seed` on a
 * cubic grid of side `size`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum PsStatus ps_phantom_generate(uint64_t seed, size_t index, size_t size, struct PsCase **out);

/**
 * Loads a case directory of `<id>_{t1,t1ce,t2,flair}.nii[.gz]` volumes
 * and, when present, `<id>_seg.nii[.gz]`.
 *
 * # Safety
 * `dir` must be a nul-terminated string; `out` as in [`ps_phantom_generate`].
 */
enum PsStatus ps_case_load(const char *dir, struct PsCase **out);

/**
 * # Safety
 * `case` must come from this library and not be used afterwards. Null is ignored.
 */
void ps_case_free(struct PsCase *case_);

/**
 * Writes the grid size `[h, w, d]`.
 *
 * # Safety
 * `case` must be a live handle and `dims` must hold three writable values.
 */
enum PsStatus ps_case_dims(const struct PsCase *case_, size_t *dims);

/**
 * Z-scores every modality inside its brain mask, in place.
 *
 * # Safety
 * `case` must be a live handle not aliased by another thread.
 */
enum PsStatus ps_case_normalize(struct PsCase *case_);

/**
 * Copies the `[4][h][w][d]` intensities.
 *
 * # Safety
 * `out` must hold `out_len` writable values.
 */
enum PsStatus ps_case_input(const struct PsCase *case_, double *out, size_t out_len);

/**
 * Copies the raw labels {0, 1, 2, 4}; `Data` if the case is unlabelled.
 *
 * # Safety
 * `out` must hold `out_len` writable bytes.
 */
enum PsStatus ps_case_labels(const struct PsCase *case_, uint8_t *out, size_t out_len);

/**
 * Dice and HD95 (mm) of the TC, ET and WT regions between two raw label
 * maps. `spacing` may be null for 1 mm isotropic; `penalty` below zero
 * selects the grid diagonal for a region missing from one side only.
 *
 * # Safety
 * `pred` and `truth` must hold `h*w*d` bytes, `spacing` null or three
 * values, and `dice`, `hd95` three writable values each.
 */
enum PsStatus ps_region_scores(const uint8_t *pred,
                               const uint8_t *truth,
                               const size_t *dims,
                               const double *spacing,
                               double penalty,
                               double *dice,
                               double *hd95);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOSEG_H */
