#ifndef FINEMORPHS_H
#define FINEMORPHS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every fallible entry point.
typedef enum FmStatus {
  FM_STATUS_OK = 0,
  FM_STATUS_NULL_POINTER = 1,
  FM_STATUS_INVALID_ARGUMENT = 2,
  FM_STATUS_NUMERICAL = 3,
  FM_STATUS_IO = 4,
  FM_STATUS_UNSUPPORTED_VERSION = 5,
  FM_STATUS_CORRUPT_MODEL = 6,
  FM_STATUS_PANIC = 7,
} FmStatus;

// A trained model. Only ever handled through pointers.
typedef struct FmModel FmModel;

// Training options. Zero fields select the library defaults, except `seed`.
typedef struct FmTrainOptions {
  uint64_t seed;
  // Anchor count; 0 uses every training point.
  size_t n_subset;
  size_t max_sigma_loops;
  // L-BFGS iteration cap per optimization.
  size_t max_iters;
  // Euler steps per flow module.
  size_t steps;
  // Kernel width of every flow module.
  double width;
  // Dummy dimensions; negative selects the default.
  int64_t pad;
} FmTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library defaults for [`fm_train`].
struct FmTrainOptions fm_train_options_default(void);

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into this library from the same thread.
const char *fm_last_error(void);

// Library version as a static NUL-terminated string.
const char *fm_version(void);

// Trains `sequence` (for example `"ADA"`) on `n` rows of `x` (`n × x_dim`)
// and `y` (`n × y_dim`). `options` may be null for defaults. On success
// `*out` receives a new handle.
//
// # Safety
// `sequence` must be a NUL-terminated string, `x` and `y` must point to
// `n * x_dim` and `n * y_dim` readable doubles, and `out` must be writable.
enum FmStatus fm_train(const char *sequence,
                       const double *x,
                       const double *y,
                       size_t n,
                       size_t x_dim,
                       size_t y_dim,
                       const struct FmTrainOptions *options,
                       struct FmModel **out);

// Predicts `n` rows of `x` (`n × x_dim`) into `out` (`n × output_dim`,
// `out_len` doubles available).
//
// # Safety
// `model` must be a live handle, `x` must point to `n * x_dim` readable
// doubles and `out` to `out_len` writable doubles.
enum FmStatus fm_predict(const struct FmModel *model,
                         const double *x,
                         size_t n,
                         size_t x_dim,
                         double *out,
                         size_t out_len);

// Loads a model file into a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` must be writable.
enum FmStatus fm_model_load(const char *path, struct FmModel **out);

// Writes a model file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum FmStatus fm_model_save(const struct FmModel *model, const char *path);

// Number of predictor columns the model expects, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t fm_model_input_dim(const struct FmModel *model);

// Number of response columns the model produces, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t fm_model_output_dim(const struct FmModel *model);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void fm_model_free(struct FmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FINEMORPHS_H */
