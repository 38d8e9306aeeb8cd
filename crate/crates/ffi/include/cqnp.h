#ifndef CQNP_H
#define CQNP_H

/* Generated by cbindgen from the cqnp-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum CqnpStatus {
  CQNP_OK = 0,
  CQNP_NULL_ARGUMENT = 1,
  CQNP_IO_ERROR = 2,
  CQNP_FORMAT_ERROR = 3,
  CQNP_KIND_MISMATCH = 4,
  CQNP_NUMERICAL_ERROR = 5,
  CQNP_INVALID_ARGUMENT = 6,
  CQNP_PANIC = 7,
} CqnpStatus;

// Opaque handle to a loaded model.
typedef struct CqnpModel CqnpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread. The pointer
// stays valid until the next failing call on the same thread.
const char *cqnp_last_error_message(void);

// Library version as a static string.
const char *cqnp_version(void);

// Load a checkpoint. On success writes a handle to `out`; the caller owns
// it and must release it with `cqnp_model_free`.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum CqnpStatus cqnp_model_load(const char *path, struct CqnpModel **out);

// Release a handle returned by `cqnp_model_load`. Null is a no-op.
//
// # Safety
// `model` must be a pointer previously returned by `cqnp_model_load`
// that has not been freed yet.
void cqnp_model_free(struct CqnpModel *model);

// Model kind: 0 = cnp, 1 = cqnp, 2 = acqnp; -1 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
int cqnp_model_kind(const struct CqnpModel *model);

// Number of trainable parameters; 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
uint64_t cqnp_model_param_count(const struct CqnpModel *model);

// Per-point predictive log-likelihood of `n_points` (x, y) pairs given a
// context set. Quantile models draw `n_tau` fresh levels per point from
// `seed`; the CNP ignores both. `out_ll` must hold `n_points` doubles.
//
// # Safety
// All pointers must be valid for their stated lengths.
enum CqnpStatus cqnp_log_lik(const struct CqnpModel *model,
                             const double *ctx_x,
                             const double *ctx_y,
                             size_t n_ctx,
                             const double *xs,
                             const double *ys,
                             size_t n_points,
                             size_t n_tau,
                             uint64_t seed,
                             double *out_ll);

// Predictive mean at each x: the softmax-weighted mixture mean over
// `n_tau` drawn levels (quantile kinds) or the Gaussian mean (CNP).
// `out_mean` must hold `n_xs` doubles.
//
// # Safety
// All pointers must be valid for their stated lengths.
enum CqnpStatus cqnp_predict_mean(const struct CqnpModel *model,
                                  const double *ctx_x,
                                  const double *ctx_y,
                                  size_t n_ctx,
                                  const double *xs,
                                  size_t n_xs,
                                  size_t n_tau,
                                  uint64_t seed,
                                  double *out_mean);

// Decode quantile curves: for each of `n_xs` inputs and `n_levels`
// requested levels, the level actually used, the location, and the
// softmax mixing weight. Each output buffer must hold `n_xs * n_levels`
// doubles, laid out x-major. Fails with a kind mismatch on a CNP handle.
//
// # Safety
// All pointers must be valid for their stated lengths.
enum CqnpStatus cqnp_predict_quantiles(const struct CqnpModel *model,
                                       const double *ctx_x,
                                       const double *ctx_y,
                                       size_t n_ctx,
                                       const double *xs,
                                       size_t n_xs,
                                       const double *levels,
                                       size_t n_levels,
                                       double *out_tau,
                                       double *out_mu,
                                       double *out_weight);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CQNP_H */
