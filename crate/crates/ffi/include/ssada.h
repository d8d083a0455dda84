#ifndef SSADA_H
#define SSADA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum SsadaStatus {
  SSADA_STATUS_OK = 0,
  // An argument or configuration violated a documented constraint.
  SSADA_STATUS_VALIDATION = 1,
  // A file could not be read or written.
  SSADA_STATUS_IO = 2,
  // A file was malformed.
  SSADA_STATUS_PARSE = 3,
  // A precondition of the operation was broken (e.g. image size mismatch).
  SSADA_STATUS_CONTRACT = 4,
  // Training diverged.
  SSADA_STATUS_NON_FINITE = 5,
  // A required pointer argument was null, or a string was not UTF-8.
  SSADA_STATUS_INVALID_ARGUMENT = 6,
  // An internal panic was caught at the boundary.
  SSADA_STATUS_PANIC = 7,
} SsadaStatus;

// A trained segmentation model.
typedef struct SsadaModel SsadaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next call.
const char *ssada_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ssada_version(void);

// Renders the synthetic dataset into `out_dir`.
//
// `spec_json` may be null for the default spec; `seed` replaces the spec's seed.
//
// # Safety
// String arguments must be null or NUL-terminated.
enum SsadaStatus ssada_generate_dataset(const char *spec_json, const char *out_dir, uint64_t seed);

// Runs one training experiment described by an ExperimentConfig JSON object.
//
// Writes `final_miou` (may be null) with the final target-val mIoU.
//
// # Safety
// String arguments must be NUL-terminated; `final_miou` must be null or writable.
enum SsadaStatus ssada_train(const char *config_json,
                             const char *run_dir,
                             bool force,
                             double *final_miou);

// Loads a model from a checkpoint file into `*out`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum SsadaStatus ssada_model_load(const char *path, struct SsadaModel **out);

// Releases a model. Null is accepted.
//
// # Safety
// `model` must come from [`ssada_model_load`] and not be used afterwards.
void ssada_model_free(struct SsadaModel *model);

// Input height, width and class count of a model. Any output pointer may be null.
//
// # Safety
// `model` must be a live handle; non-null outputs must be writable.
enum SsadaStatus ssada_model_dims(const struct SsadaModel *model,
                                  size_t *height,
                                  size_t *width,
                                  size_t *num_classes);

// Class probabilities for one image.
//
// # Safety
// `image` holds `image_len` floats; `probs` has room for `probs_len` doubles.
enum SsadaStatus ssada_model_predict(const struct SsadaModel *model,
                                     const float *image,
                                     size_t image_len,
                                     double *probs,
                                     size_t probs_len);

// Mean per-pixel entropy of a class-major probability map. Each pixel's
// column must sum to 1 within 1e-6.
//
// # Safety
// `probs` holds `num_classes * height * width` doubles; `out` is writable.
enum SsadaStatus ssada_entropy_score(const double *probs,
                                     size_t num_classes,
                                     size_t height,
                                     size_t width,
                                     double *out);

// Mean per-pixel maximum probability of a class-major probability map.
//
// # Safety
// As for [`ssada_entropy_score`].
enum SsadaStatus ssada_confidence_score(const double *probs,
                                        size_t num_classes,
                                        size_t height,
                                        size_t width,
                                        double *out);

// Class weights from per-class IoU. A NaN IoU marks an undefined class.
//
// # Safety
// `iou` and `weights` each hold `num_classes` doubles.
enum SsadaStatus ssada_iou_weights(const double *iou,
                                   size_t num_classes,
                                   double u,
                                   double *weights);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSADA_H */
