#ifndef SOOD_H
#define SOOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SoodStatus {
  SOOD_STATUS_OK = 0,
  SOOD_STATUS_NULL_POINTER = 1,
  SOOD_STATUS_INVALID_ARGUMENT = 2,
  SOOD_STATUS_DOMAIN = 3,
  SOOD_STATUS_SHAPE = 4,
  SOOD_STATUS_CONSISTENCY = 5,
  SOOD_STATUS_IO = 6,
  SOOD_STATUS_PANIC = 7,
} SoodStatus;

typedef enum SoodExponent {
  SOOD_EXPONENT_ROOT = 0,
  SOOD_EXPONENT_POWER = 1,
} SoodExponent;

typedef enum SoodRatioKey {
  SOOD_RATIO_KEY_SCORE = 0,
  SOOD_RATIO_KEY_JOINT = 1,
} SoodRatioKey;

// Dense predictions for the five levels of one image.
typedef struct SoodPredictions SoodPredictions;

// Result of a pseudo-label selection.
typedef struct SoodSelection SoodSelection;

// Rotated box, angle in radians.
typedef struct SoodBox {
  double cx;
  double cy;
  double w;
  double h;
  double theta;
} SoodBox;

// One selected cell.
typedef struct SoodPseudoLabel {
  uint32_t level;
  size_t cell;
  size_t class_index;
  double score;
  double centerness;
  double weight;
} SoodPseudoLabel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len - 1` bytes). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sood_last_error_message(char *buf, size_t len);

// # Safety
// `a`, `b` and `out` must be valid pointers.
enum SoodStatus sood_rotated_iou(const struct SoodBox *a, const struct SoodBox *b, double *out);

// Greedy rotated NMS. Writes kept indices in descending score order to
// `keep` (capacity `n`) and their count to `kept`.
//
// # Safety
// `boxes` and `scores` must hold `n` elements, `keep` room for `n`.
enum SoodStatus sood_rotated_nms(const struct SoodBox *boxes,
                                 const double *scores,
                                 size_t n,
                                 double iou_thresh,
                                 size_t *keep,
                                 size_t *kept);

// `1 - squared Mahalanobis distance` of `(x, y)` under the box Gaussian.
//
// # Safety
// `b` and `out` must be valid pointers.
enum SoodStatus sood_gaussian_centerness(const struct SoodBox *b, double x, double y, double *out);

// Soft-label exponent of a box.
//
// # Safety
// `b` and `out` must be valid pointers.
enum SoodStatus sood_ccsl_gamma(const struct SoodBox *b,
                                double image_w,
                                double image_h,
                                double beta,
                                enum SoodExponent convention,
                                double *out);

// Soft classification target at `(x, y)` for exponent `gamma`.
//
// # Safety
// `b` and `out` must be valid pointers.
enum SoodStatus sood_ccsl_value(const struct SoodBox *b,
                                double x,
                                double y,
                                double gamma,
                                double *out);

// Quality focal loss and its derivative in `sigma`.
//
// # Safety
// `loss` and `grad` must be valid pointers.
enum SoodStatus sood_qfl(double sigma, double y, double focusing, double *loss, double *grad);

// Binary cross-entropy (zero at `pred == target`) and its derivative.
//
// # Safety
// `loss` and `grad` must be valid pointers.
enum SoodStatus sood_bce(double pred, double target, double *loss, double *grad);

// Smooth-L1 loss and its derivative in `pred`.
//
// # Safety
// `loss` and `grad` must be valid pointers.
enum SoodStatus sood_smooth_l1(double pred,
                               double target,
                               double delta,
                               double *loss,
                               double *grad);

// `out[i] = m * teacher[i] + (1 - m) * student[i]`; `out` may alias `teacher`.
//
// # Safety
// All three arrays must hold `n` elements.
enum SoodStatus sood_ema_update(const double *teacher,
                                const double *student,
                                size_t n,
                                double momentum,
                                double *out);

// Empty prediction set; add the five levels with `sood_predictions_add_level`.
struct SoodPredictions *sood_predictions_new(void);

// Adds one level: `scores` is `width * height * num_classes` row-major,
// `centerness` is `width * height`.
//
// # Safety
// `preds` must come from `sood_predictions_new`; arrays must have the sizes above.
enum SoodStatus sood_predictions_add_level(struct SoodPredictions *preds,
                                           uint32_t level,
                                           size_t width,
                                           size_t height,
                                           size_t num_classes,
                                           const double *scores,
                                           const double *centerness);

// Loads a JSON-lines prediction dump.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SoodStatus sood_predictions_from_jsonl(const char *path, struct SoodPredictions **out);

// # Safety
// `preds` must be null or come from this library and not be used afterwards.
void sood_predictions_free(struct SoodPredictions *preds);

// Scale-aware selection: joint top-k over P3/P4 then the score threshold,
// threshold only on P5-P7.
//
// # Safety
// `preds` must be a live handle and `out` a valid pointer.
enum SoodStatus sood_sla_select(const struct SoodPredictions *preds,
                                double score_thresh,
                                size_t topk,
                                struct SoodSelection **out);

// Global top `ceil(ratio * cells)` by score or joint confidence.
//
// # Safety
// `preds` must be a live handle and `out` a valid pointer.
enum SoodStatus sood_ratio_select(const struct SoodPredictions *preds,
                                  double ratio,
                                  enum SoodRatioKey key,
                                  struct SoodSelection **out);

// Number of selected cells; 0 for a null handle.
//
// # Safety
// `sel` must be null or a live handle.
size_t sood_selection_len(const struct SoodSelection *sel);

// Cells considered across all levels; 0 for a null handle.
//
// # Safety
// `sel` must be null or a live handle.
size_t sood_selection_cells(const struct SoodSelection *sel);

// Entry `index`, ordered by `(level, cell)`.
//
// # Safety
// `sel` must be a live handle and `out` a valid pointer.
enum SoodStatus sood_selection_get(const struct SoodSelection *sel,
                                   size_t index,
                                   struct SoodPseudoLabel *out);

// # Safety
// `sel` must be null or come from this library and not be used afterwards.
void sood_selection_free(struct SoodSelection *sel);

// Library version, static NUL-terminated string.
const char *sood_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOOD_H */
