#ifndef YKD_H
#define YKD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum YkdStatus {
  YKD_STATUS_OK = 0,
  YKD_STATUS_NULL_POINTER = 1,
  YKD_STATUS_INVALID_INPUT = 2,
  YKD_STATUS_IO = 3,
  YKD_STATUS_CHECKPOINT = 4,
  YKD_STATUS_SHAPE = 5,
  YKD_STATUS_FORMAT = 6,
  YKD_STATUS_UTF8 = 7,
  YKD_STATUS_OUT_OF_RANGE = 8,
  YKD_STATUS_BUFFER_TOO_SMALL = 9,
  YKD_STATUS_PANIC = 10,
} YkdStatus;

// Detections of one image.
typedef struct YkdDetections YkdDetections;

// A loaded model.
typedef struct YkdModel YkdModel;

// Plain view of one detection; the mask is read separately.
typedef struct YkdDetection {
  uint32_t class_id;
  float score;
  // `x0, y0, x1, y1` in pixels.
  float bbox[4];
  size_t source_branch;
  size_t mask_width;
  size_t mask_height;
  size_t mask_area;
} YkdDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until
// the next call on the same thread.
const char *ykd_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ykd_version(void);

// Loads a checkpoint directory. With `inference_only` set, only the
// latest head is read.
enum YkdStatus ykd_model_load(const char *dir, bool inference_only, struct YkdModel **out);

enum YkdStatus ykd_model_save(const struct YkdModel *model, const char *dir);

void ykd_model_free(struct YkdModel *model);

// Number of feature-extractor branches.
enum YkdStatus ykd_model_num_branches(const struct YkdModel *model, size_t *out);

// Index of the latest step.
enum YkdStatus ykd_model_current_step(const struct YkdModel *model, size_t *out);

// Copies the latest head's class ids into `buf`. `written` always receives
// the number of classes; a short buffer yields `BufferTooSmall`.
enum YkdStatus ykd_model_class_ids(const struct YkdModel *model,
                                   uint32_t *buf,
                                   size_t capacity,
                                   size_t *written);

// Runs every branch on one image given as planar `channels x height x
// width` floats in `[0, 1]`.
enum YkdStatus ykd_infer(const struct YkdModel *model,
                         const float *pixels,
                         size_t channels,
                         size_t height,
                         size_t width,
                         float score_thresh,
                         struct YkdDetections **out);

enum YkdStatus ykd_detections_len(const struct YkdDetections *dets, size_t *out);

enum YkdStatus ykd_detection_get(const struct YkdDetections *dets,
                                 size_t index,
                                 struct YkdDetection *out);

// Copies the row-major 0/1 mask of detection `index`; `len` must be at
// least `mask_width * mask_height`.
enum YkdStatus ykd_detection_mask(const struct YkdDetections *dets,
                                  size_t index,
                                  uint8_t *buf,
                                  size_t len);

void ykd_detections_free(struct YkdDetections *dets);

// New model equal to `later` with its latest head replaced by
// `w_i * earlier_head + w_j * later_head`.
enum YkdStatus ykd_average_heads(const struct YkdModel *earlier,
                                 const struct YkdModel *later,
                                 double w_i,
                                 double w_j,
                                 struct YkdModel **out);

// Linear CKA between row-major `n x dx` and `n x dy` matrices.
enum YkdStatus ykd_linear_cka(const double *x,
                              const double *y,
                              size_t n,
                              size_t dx,
                              size_t dy,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* YKD_H */
