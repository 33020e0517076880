#ifndef DGP_FFI_H
#define DGP_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum DgpStatus {
  DGP_STATUS_OK = 0,
  DGP_STATUS_NULL_POINTER = 1,
  DGP_STATUS_INVALID_ARGUMENT = 2,
  DGP_STATUS_DIMENSION_MISMATCH = 3,
  DGP_STATUS_DEGENERATE_DATA = 4,
  DGP_STATUS_NUMERICAL_FAILURE = 5,
  DGP_STATUS_NON_FINITE_LOSS = 6,
  DGP_STATUS_IO = 7,
  DGP_STATUS_PARSE = 8,
  DGP_STATUS_PANIC = 9,
} DgpStatus;

// Task passed to `dgp_model_init`.
typedef enum DgpTask {
  DGP_TASK_REGRESSION = 0,
  DGP_TASK_BINARY_CLASSIFICATION = 1,
} DgpTask;

// Opaque model handle.
typedef struct DgpModel DgpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, or an empty
// string. Valid until the next call into the library from this thread.
const char *dgp_last_error(void);

// Library version as a static NUL-terminated string.
const char *dgp_version(void);

// Builds an untrained model with the default initialization for
// `num_layers` layers and `num_inducing` inducing points.
//
// `x` is `n × input_dim` and `y` is `n × output_dim`. Classification needs a
// single 0/1 output column. On success `*out` receives a handle that must be
// released with `dgp_model_free`.
//
// # Safety
// `x` and `y` must point to buffers of the stated sizes and `out` to a
// writable handle slot.
enum DgpStatus dgp_model_init(const double *x,
                              const double *y,
                              size_t n,
                              size_t input_dim,
                              size_t output_dim,
                              enum DgpTask task,
                              size_t num_layers,
                              size_t num_inducing,
                              uint64_t seed,
                              struct DgpModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void dgp_model_free(struct DgpModel *model);

// Input width of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dgp_model_input_dim(const struct DgpModel *model);

// Output width of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dgp_model_output_dim(const struct DgpModel *model);

// Number of layers, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dgp_model_depth(const struct DgpModel *model);

// Runs `iterations` Adam steps at learning rate `lr` on `n` rows.
// `minibatch` of 0 selects `min(10000, n)`. The bound at the last step is
// written to `final_elbo` when it is not null. On `NonFiniteLoss` the model
// keeps the last parameters with a finite bound.
//
// # Safety
// `model` must be a live handle; `x` and `y` must hold `n` rows of the
// model's input and output widths.
enum DgpStatus dgp_model_train(struct DgpModel *model,
                               const double *x,
                               const double *y,
                               size_t n,
                               size_t iterations,
                               double lr,
                               size_t minibatch,
                               uint64_t seed,
                               double *final_elbo);

// Monte-Carlo estimate of the bound on `n` rows with `samples` draws.
//
// # Safety
// `model` must be a live handle, `x`/`y` must hold `n` rows and `out` must
// be writable.
enum DgpStatus dgp_model_elbo(const struct DgpModel *model,
                              const double *x,
                              const double *y,
                              size_t n,
                              size_t samples,
                              uint64_t seed,
                              double *out);

// Predictive mean and variance of `y*` at `n` rows, each written as an
// `n × output_dim` row-major buffer, from a `samples`-component mixture.
//
// # Safety
// `model` must be a live handle, `x` must hold `n` rows, and `mean` and
// `variance` must each have room for `n * output_dim` doubles.
enum DgpStatus dgp_model_predict(const struct DgpModel *model,
                                 const double *x,
                                 size_t n,
                                 size_t samples,
                                 uint64_t seed,
                                 double *mean,
                                 double *variance);

// Log predictive density of each of `n` observations, written to `out`.
//
// # Safety
// `model` must be a live handle, `x`/`y` must hold `n` rows and `out` must
// have room for `n` doubles.
enum DgpStatus dgp_model_log_density(const struct DgpModel *model,
                                     const double *x,
                                     const double *y,
                                     size_t n,
                                     size_t samples,
                                     uint64_t seed,
                                     double *out);

// `P(y* = 1)` at each of `n` rows for a classification model.
//
// # Safety
// `model` must be a live handle, `x` must hold `n` rows and `out` must have
// room for `n` doubles.
enum DgpStatus dgp_model_predict_proba(const struct DgpModel *model,
                                       const double *x,
                                       size_t n,
                                       size_t samples,
                                       uint64_t seed,
                                       double *out);

// Writes the model to a JSON checkpoint at `path`.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum DgpStatus dgp_model_save(const struct DgpModel *model, const char *path);

// Loads a checkpoint written by `dgp_model_save` or the CLI.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable handle slot.
enum DgpStatus dgp_model_load(const char *path, struct DgpModel **out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DGP_FFI_H */
