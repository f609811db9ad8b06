#ifndef THINSEC_H
#define THINSEC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID = 2,
  TS_STATUS_SHAPE = 3,
  TS_STATUS_IO = 4,
  TS_STATUS_FORMAT = 5,
  TS_STATUS_MISMATCH = 6,
  TS_STATUS_RUNTIME = 7,
  TS_STATUS_BUFFER = 8,
  TS_STATUS_PANIC = 9,
} TsStatus;

/**
 * One group of seven views with its masks.
 */
typedef struct TsGroup TsGroup;

/**
 * A loaded checkpoint.
 */
typedef struct TsModel TsModel;

/**
 * Parameters for [`ts_synth_generate`].
 */
typedef struct TsSynthSpec {
  size_t image_size;
  size_t n_grains;
  uint64_t seed;
  double noise_sigma;
} TsSynthSpec;

typedef struct TsEdgeScores {
  double miou;
  double f1;
  double precision;
  double recall;
  double accuracy;
} TsEdgeScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call on the same thread.
 */
const char *ts_last_error(void);

/**
 * Generates a synthetic group; `*out` receives a new handle.
 *
 * # Safety
 * `spec` and `out` must be valid pointers.
 */
enum TsStatus ts_synth_generate(const struct TsSynthSpec *spec, struct TsGroup **out);

/**
 * Reads `<root>/<group_id>/`; the semantic mask is optional.
 *
 * # Safety
 * `root` and `group_id` must be NUL-terminated strings, `out` a valid pointer.
 */
enum TsStatus ts_group_load(const char *root, const char *group_id, struct TsGroup **out);

/**
 * # Safety
 * `group` must come from this library and not be used afterwards.
 */
void ts_group_free(struct TsGroup *group);

/**
 * Image height and width of a group.
 *
 * # Safety
 * All pointers must be valid.
 */
enum TsStatus ts_group_dims(const struct TsGroup *group, size_t *height, size_t *width);

/**
 * Copies the views as `[7, H, W, 3]` values in `[0, 1]`.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum TsStatus ts_group_views(const struct TsGroup *group, double *buf, size_t len);

/**
 * Copies the edge mask as `[H, W]`.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum TsStatus ts_group_edge(const struct TsGroup *group, double *buf, size_t len);

/**
 * Copies the per-pixel class indices as `[H, W]`. Fails with
 * `TS_STATUS_INVALID` when the group has no semantic mask.
 *
 * # Safety
 * `buf` must hold `len` bytes.
 */
enum TsStatus ts_group_semantic(const struct TsGroup *group, uint8_t *buf, size_t len);

/**
 * Color-entropy map of an 8-bit RGB image (`[H, W, 3]`, row-major) into
 * `out` (`[H, W]`).
 *
 * # Safety
 * `rgb` must hold `height * width * 3` bytes and `out` `out_len` doubles.
 */
enum TsStatus ts_entropy_map(const uint8_t *rgb,
                             size_t height,
                             size_t width,
                             uint32_t tau,
                             double *out,
                             size_t out_len);

/**
 * Loads a checkpoint written by training.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TsStatus ts_model_load(const char *path, struct TsModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ts_model_free(struct TsModel *model);

/**
 * Training stage (1 = teacher, 2 = student) of a loaded model.
 *
 * # Safety
 * `model` must be a valid handle.
 */
uint8_t ts_model_stage(const struct TsModel *model);

/**
 * Runs a model on one group.
 *
 * `edge_out` receives the `[H, W]` edge probabilities. For stage-2 models
 * `semantic_out` (may be NULL) receives `[4, H, W]` class probabilities and
 * `prompt` (`[H, W]`) is the teacher map; pass NULL only when the model was
 * trained without it.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum TsStatus ts_model_predict(const struct TsModel *model,
                               const struct TsGroup *group,
                               const double *prompt,
                               double *edge_out,
                               size_t edge_len,
                               double *semantic_out,
                               size_t semantic_len);

/**
 * Edge metrics of a probability map against a binary mask, both `[H, W]`.
 *
 * # Safety
 * `pred` and `truth` must hold `height * width` doubles; `out` must be valid.
 */
enum TsStatus ts_edge_metrics(const double *pred,
                              const double *truth,
                              size_t height,
                              size_t width,
                              double threshold,
                              struct TsEdgeScores *out);

/**
 * Number of views per group.
 */
size_t ts_view_count(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THINSEC_H */
