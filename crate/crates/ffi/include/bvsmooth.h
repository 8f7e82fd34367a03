#ifndef BVSMOOTH_H
#define BVSMOOTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BvStatus {
  BV_STATUS_OK = 0,
  BV_STATUS_NULL_POINTER = 1,
  BV_STATUS_INVALID_ARGUMENT = 2,
  BV_STATUS_INVALID_CONFIG = 3,
  BV_STATUS_DIM_MISMATCH = 4,
  BV_STATUS_NOT_POSITIVE_DEFINITE = 5,
  BV_STATUS_NON_FINITE = 6,
  BV_STATUS_WEIGHT_COLLAPSE = 7,
  BV_STATUS_BOUND_VIOLATION = 8,
  BV_STATUS_IO = 9,
  BV_STATUS_BUFFER_TOO_SMALL = 10,
  BV_STATUS_PANIC = 11,
  BV_STATUS_OTHER = 12,
} BvStatus;

/**
 * Linear-Gaussian state-space model.
 */
typedef struct BvModel BvModel;

/**
 * Kalman smoothing result for one observation sequence.
 */
typedef struct BvSmoothed BvSmoothed;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message (NUL-terminated, truncated to fit) into
 * `buf` and returns the full message length in bytes, excluding the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t bv_last_error_message(char *buf, size_t cap);

/**
 * Scalar model `x0 ~ N(a0, q0)`, `x' = a x + N(0, q)`, `y = b x + N(0, r)`.
 *
 * # Safety
 * `out` must be valid for writing one pointer.
 */
enum BvStatus bv_model_new_scalar(double a0,
                                  double q0,
                                  double a,
                                  double q,
                                  double b,
                                  double r,
                                  struct BvModel **out);

/**
 * Model from JSON with fields `a0, q0, a, q, b, r` (matrices as row lists).
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` valid for one pointer.
 */
enum BvStatus bv_model_from_json(const char *json, struct BvModel **out);

/**
 * # Safety
 * `model` must be null or a handle from a `bv_model_*` constructor.
 */
void bv_model_free(struct BvModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t bv_model_state_dim(const struct BvModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t bv_model_obs_dim(const struct BvModel *model);

/**
 * Simulates `x_{0:n}`, `y_{0:n}` into row-major buffers of
 * `(n+1)·state_dim` and `(n+1)·obs_dim` doubles.
 *
 * # Safety
 * `model` must be a live handle; buffers must have the sizes above.
 */
enum BvStatus bv_simulate(const struct BvModel *model,
                          size_t n,
                          uint64_t seed,
                          double *states,
                          double *observations);

/**
 * Exact smoothing of `n_obs` observations stored row-major in `ys`.
 *
 * # Safety
 * `ys` must hold `n_obs·obs_dim` doubles; `out` valid for one pointer.
 */
enum BvStatus bv_kalman_smooth(const struct BvModel *model,
                               const double *ys,
                               size_t n_obs,
                               struct BvSmoothed **out);

/**
 * # Safety
 * `s` must be null or a handle from [`bv_kalman_smooth`].
 */
void bv_smoothed_free(struct BvSmoothed *s);

/**
 * Number of smoothing marginals (`n + 1`).
 *
 * # Safety
 * `s` must be a live handle.
 */
size_t bv_smoothed_len(const struct BvSmoothed *s);

/**
 * # Safety
 * `s` must be a live handle.
 */
double bv_smoothed_loglik(const struct BvSmoothed *s);

/**
 * Smoothed mean of `x_k` (`state_dim` values).
 *
 * # Safety
 * `s` must be a live handle and `out` valid for `cap` doubles.
 */
enum BvStatus bv_smoothed_mean(const struct BvSmoothed *s, size_t k, double *out, size_t cap);

/**
 * Smoothed covariance of `x_k`, row-major (`state_dim²` values).
 *
 * # Safety
 * `s` must be a live handle and `out` valid for `cap` doubles.
 */
enum BvStatus bv_smoothed_cov(const struct BvSmoothed *s, size_t k, double *out, size_t cap);

/**
 * `E[Σ_{k<n} x_k | y_{0:n}]` (`state_dim` values).
 *
 * # Safety
 * `s` must be a live handle and `out` valid for `cap` doubles.
 */
enum BvStatus bv_smoothed_state_sum(const struct BvSmoothed *s, double *out, size_t cap);

/**
 * Runs the experiment described by a JSON config (same schema as the CLI),
 * writing into `out_dir`. The config must set `kind`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum BvStatus bv_run_experiment(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BVSMOOTH_H */
