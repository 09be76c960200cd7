#ifndef MUSEDEC_H
#define MUSEDEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MusedecStatus {
  MUSEDEC_STATUS_OK = 0,
  MUSEDEC_STATUS_NULL_POINTER = 1,
  MUSEDEC_STATUS_INVALID_ARGUMENT = 2,
  MUSEDEC_STATUS_SHAPE_MISMATCH = 3,
  MUSEDEC_STATUS_NON_FINITE = 4,
  MUSEDEC_STATUS_IO = 5,
  MUSEDEC_STATUS_BAD_FORMAT = 6,
  MUSEDEC_STATUS_VALIDATION = 7,
  MUSEDEC_STATUS_MISSING_CHECKPOINT = 8,
  MUSEDEC_STATUS_VARIANT_LACKS_TOKENS = 9,
  MUSEDEC_STATUS_BUFFER_TOO_SMALL = 10,
  MUSEDEC_STATUS_PANIC = 11,
} MusedecStatus;

// Trained model loaded from a checkpoint directory.
typedef struct MusedecModel MusedecModel;

// Dense row-major `f64` tensor.
typedef struct MusedecTensor MusedecTensor;

// Scalar multi-label metrics.
typedef struct MusedecMetrics {
  double map;
  double auc;
  double hamming;
} MusedecMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *musedec_last_error(void);

// Library version as a static NUL-terminated string.
const char *musedec_version(void);

// Creates a tensor by copying `product(shape)` values from `data`.
//
// # Safety
// `shape` must point to `ndim` values and `data` to `product(shape)` values.
enum MusedecStatus musedec_tensor_new(const size_t *shape,
                                      size_t ndim,
                                      const double *data,
                                      struct MusedecTensor **out);

// Reads an MSED file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MusedecStatus musedec_tensor_read(const char *path, struct MusedecTensor **out);

// Writes an MSED file; `dtype` is 1 for float32 and 2 for float64.
//
// # Safety
// `tensor` must be a live handle and `path` a NUL-terminated string.
enum MusedecStatus musedec_tensor_write(const struct MusedecTensor *tensor,
                                        const char *path,
                                        uint8_t dtype);

// Rank of the tensor, 0 for a null handle.
//
// # Safety
// `tensor` must be null or a live handle.
size_t musedec_tensor_ndim(const struct MusedecTensor *tensor);

// Number of elements, 0 for a null handle.
//
// # Safety
// `tensor` must be null or a live handle.
size_t musedec_tensor_len(const struct MusedecTensor *tensor);

// Copies the dimensions into `dims`, which holds `capacity` entries.
//
// # Safety
// `dims` must be writable for `capacity` entries.
enum MusedecStatus musedec_tensor_shape(const struct MusedecTensor *tensor,
                                        size_t *dims,
                                        size_t capacity);

// Copies the row-major values into `data`, which holds `capacity` entries.
//
// # Safety
// `data` must be writable for `capacity` entries.
enum MusedecStatus musedec_tensor_data(const struct MusedecTensor *tensor,
                                       double *data,
                                       size_t capacity);

// Releases a tensor; null is ignored.
//
// # Safety
// `tensor` must be null or a handle not yet freed.
void musedec_tensor_free(struct MusedecTensor *tensor);

// Cosine similarity matrix of the rows of a 2-D tensor.
//
// # Safety
// `features` must be a live handle; `out` must be writable.
enum MusedecStatus musedec_cosine_rsm(const struct MusedecTensor *features,
                                      struct MusedecTensor **out);

// Squared Frobenius distance between `target` and the cosine RSM of the
// rows of `z`, divided by `B²`.
//
// # Safety
// Handles must be live; `out` must be writable.
enum MusedecStatus musedec_rsa_loss(const struct MusedecTensor *target,
                                    const struct MusedecTensor *z,
                                    double *out);

// mAP, macro AUC and Hamming distance of `n × C` scores against binary labels.
//
// # Safety
// Handles must be live; `out` must be writable.
enum MusedecStatus musedec_evaluate(const struct MusedecTensor *scores,
                                    const struct MusedecTensor *labels,
                                    double threshold,
                                    struct MusedecMetrics *out);

// Holm step-down adjustment of `n` p-values. `adjusted` receives the
// adjusted values and `rejected` 1 or 0 per hypothesis, in input order.
//
// # Safety
// `p_values`, `adjusted` and `rejected` must each hold `n` entries.
enum MusedecStatus musedec_holm(const double *p_values,
                                size_t n,
                                double alpha,
                                double *adjusted,
                                uint8_t *rejected);

// Loads the best-validation parameters from a checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum MusedecStatus musedec_model_load(const char *dir, struct MusedecModel **out);

// Number of subjects with token rows, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t musedec_model_subject_count(const struct MusedecModel *model);

// Number of output classes, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t musedec_model_class_count(const struct MusedecModel *model);

// Class probabilities for `B × M × d` patches; `subjects` holds the
// subject row of each of the `B` samples.
//
// # Safety
// Handles must be live, `subjects` must hold `batch` entries and `out`
// must be writable.
enum MusedecStatus musedec_model_predict(const struct MusedecModel *model,
                                         const struct MusedecTensor *patches,
                                         const size_t *subjects,
                                         size_t batch,
                                         struct MusedecTensor **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void musedec_model_free(struct MusedecModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUSEDEC_H */
