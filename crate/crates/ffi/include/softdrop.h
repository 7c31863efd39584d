#ifndef SOFTDROP_H
#define SOFTDROP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum SdStatus {
  SD_STATUS_OK = 0,
  SD_STATUS_NULL_POINTER = 1,
  SD_STATUS_INVALID_ARGUMENT = 2,
  SD_STATUS_CONFIG = 3,
  SD_STATUS_DATA = 4,
  SD_STATUS_NUMERICAL = 5,
  SD_STATUS_DIMENSION = 6,
  SD_STATUS_DOMAIN = 7,
  SD_STATUS_IO = 8,
  SD_STATUS_PANIC = 9,
} SdStatus;

// A model owned by the library.
typedef struct SdModel SdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread. The pointer stays valid until
// the next failing call on the same thread.
const char *sd_last_error(void);

// Library version as a static NUL-terminated string.
const char *sd_version(void);

// Entropy in bits of the probability vector `p[0..k]`.
//
// # Safety
// `p` must point to `k` readable doubles and `out` to one writable double.
enum SdStatus sd_entropy(const double *p, size_t k, double *out);

// Mutual information in bits of `t` passes over `k` classes, stored row-major.
//
// # Safety
// `passes` must point to `t * k` readable doubles and `out` to one writable double.
enum SdStatus sd_mutual_information(const double *passes, size_t t, size_t k, double *out);

// Dice score of two binary masks of length `n`; nonzero bytes count as set.
//
// # Safety
// `pred` and `truth` must each point to `n` readable bytes; `out` to one double.
enum SdStatus sd_dice_score(const uint8_t *pred, const uint8_t *truth, size_t n, double *out);

// Parses an unsigned-byte IDX buffer, writing its rank and up to `max_rank` extents.
//
// # Safety
// `bytes` must point to `len` readable bytes, `dims` to `max_rank` writable values
// and `rank` to one writable value.
enum SdStatus sd_idx_dims(const uint8_t *bytes,
                          size_t len,
                          size_t *dims,
                          size_t max_rank,
                          size_t *rank);

// Creates an untrained MNIST network. `method` is one of `deterministic`, `dropout`,
// `dropconnect`, `sdc`, `sdc_strong`, `sdc_weak` or `bbb`; `p` is ignored for
// `deterministic` and `bbb`.
//
// # Safety
// `method` must be a NUL-terminated string and `out` a writable handle slot.
enum SdStatus sd_model_new_mnist(const char *method, double p, uint64_t seed, struct SdModel **out);

// Loads a model from a checkpoint written by `softdrop train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable handle slot.
enum SdStatus sd_model_load(const char *path, struct SdModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from this library that has not been freed.
void sd_model_free(struct SdModel *model);

// Number of scalars in one input sample.
//
// # Safety
// `model` must be a live handle.
size_t sd_model_input_len(const struct SdModel *model);

// Number of output classes.
//
// # Safety
// `model` must be a live handle.
size_t sd_model_num_classes(const struct SdModel *model);

// Monte-Carlo prediction for `n` samples of `sd_model_input_len` values each, using
// `passes` stochastic forward passes seeded by `seed`. Writes the mean softmax
// (`n * classes`), per-sample mutual information in bits (`n`) and the popular-vote
// class (`n`). Any output pointer may be null to skip it.
//
// # Safety
// `inputs` must hold `n * sd_model_input_len(model)` doubles; non-null outputs must
// have the sizes listed above.
enum SdStatus sd_mc_predict(const struct SdModel *model,
                            const double *inputs,
                            size_t n,
                            size_t passes,
                            uint64_t seed,
                            double *mean_softmax,
                            double *mutual_information,
                            size_t *popular_class);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SOFTDROP_H */
