#ifndef ECOINFER_H
#define ECOINFER_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum EcoStatus {
  ECO_STATUS_OK = 0,
  ECO_STATUS_NULL_POINTER = 1,
  /**
   * Malformed input data, options, or arguments.
   */
  ECO_STATUS_INVALID_INPUT = 2,
  ECO_STATUS_IO = 3,
  /**
   * The estimator failed numerically (rank deficiency, infeasible
   * bounds, non-convergence).
   */
  ECO_STATUS_NUMERICAL = 4,
  /**
   * A caller buffer is too small.
   */
  ECO_STATUS_BUFFER_TOO_SMALL = 5,
  ECO_STATUS_PANIC = 6,
} EcoStatus;

/**
 * An aggregate dataset.
 */
typedef struct EcoDataset EcoDataset;

/**
 * A fitted estimator together with its nuisance regressions.
 */
typedef struct EcoFit EcoFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call into the library on the same thread.
 */
const char *eco_last_error(void);

/**
 * Library version as a static string.
 */
const char *eco_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void eco_string_free(char *s);

/**
 * Builds a dataset from arrays: `xbar` is `m × d`, `z` is `m × p` (may be
 * null when `p = 0`), `sizes` may be null for unit sizes. Outcome bounds
 * apply when `bounded` is true.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths.
 */
enum EcoStatus eco_dataset_new(size_t m,
                               size_t d,
                               size_t p,
                               const double *ybar,
                               const double *xbar,
                               const double *z,
                               const double *sizes,
                               bool bounded,
                               double lower,
                               double upper,
                               struct EcoDataset **out);

/**
 * Reads a dataset from a CSV file. `schema_json` describes the columns,
 * e.g. `{"outcome": "y", "shares": ["a", "b"], "covariates": ["z"]}`.
 *
 * # Safety
 * String arguments must be nul-terminated.
 */
enum EcoStatus eco_dataset_read_csv(const char *path,
                                    const char *schema_json,
                                    struct EcoDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `data` must come from this library and not have been freed.
 */
void eco_dataset_free(struct EcoDataset *data);

/**
 * Number of geographies, groups, and covariates.
 *
 * # Safety
 * `data` must be a live handle; out-pointers may be null.
 */
enum EcoStatus eco_dataset_shape(const struct EcoDataset *data, size_t *m, size_t *d, size_t *p);

/**
 * Fits the estimator. `options_json` is a serialized set of estimation
 * options; null selects a linear sieve with LOOCV.
 *
 * # Safety
 * `data` must be a live handle and `options_json` null or nul-terminated.
 */
enum EcoStatus eco_fit(const struct EcoDataset *data,
                       const char *options_json,
                       struct EcoFit **out);

/**
 * Releases a fit. Null is ignored.
 *
 * # Safety
 * `fit` must come from this library and not have been freed.
 */
void eco_fit_free(struct EcoFit *fit);

/**
 * Number of groups in a fit.
 *
 * # Safety
 * `fit` must be a live handle.
 */
enum EcoStatus eco_fit_groups(const struct EcoFit *fit, size_t *out);

/**
 * Copies the `d` estimates into `out`.
 *
 * # Safety
 * `out` must hold `len` values.
 */
enum EcoStatus eco_fit_beta(const struct EcoFit *fit, double *out, size_t len);

/**
 * Copies the `d` standard errors into `out`.
 *
 * # Safety
 * `out` must hold `len` values.
 */
enum EcoStatus eco_fit_std_errors(const struct EcoFit *fit, double *out, size_t len);

/**
 * Copies the `d × d` covariance matrix, row-major, into `out`.
 *
 * # Safety
 * `out` must hold `len` values.
 */
enum EcoStatus eco_fit_vcov(const struct EcoFit *fit, double *out, size_t len);

/**
 * The selected penalty.
 *
 * # Safety
 * `fit` must be a live handle.
 */
enum EcoStatus eco_fit_lambda(const struct EcoFit *fit, double *out);

/**
 * The full result as JSON.
 *
 * # Safety
 * `fit` must be a live handle; free the string with [`eco_string_free`].
 */
enum EcoStatus eco_fit_to_json(const struct EcoFit *fit, char **out);

/**
 * Local estimates: `estimates`, `lower`, and `upper` receive `m × d`
 * values, row-major. Intervals are the projections of the confidence
 * region at level `alpha`.
 *
 * # Safety
 * Handles must be live; buffers must hold `len` values.
 */
enum EcoStatus eco_local_estimates(const struct EcoDataset *data,
                                   const struct EcoFit *fit,
                                   double alpha,
                                   bool unimodal,
                                   double *estimates,
                                   double *lower,
                                   double *upper,
                                   size_t len);

/**
 * Sensitivity analysis of the contrast `Σ_j weights_j β_j`, with
 * covariate benchmarks when the data have covariates. Writes a JSON
 * report.
 *
 * # Safety
 * Handles must be live and `weights` must hold `d` values.
 */
enum EcoStatus eco_sensitivity(const struct EcoDataset *data,
                               const struct EcoFit *fit,
                               const double *weights,
                               size_t d,
                               double rho,
                               char **out);

/**
 * The robustness value for bound scale `s` and bias threshold `delta`.
 */
enum EcoStatus eco_robustness_value(double s, double delta, double *out);

/**
 * The bias bound `rho · sigma · √nu · c_gamma · c_alpha`.
 */
enum EcoStatus eco_bias_bound(double sigma,
                              double nu,
                              double rho,
                              double c_gamma,
                              double c_alpha,
                              double *out);

/**
 * Generates a synthetic dataset. `config_json` is a serialized generator
 * configuration; null selects the two-group design with seed `seed`.
 * `beta_true` receives the `d` true group means when non-null.
 *
 * # Safety
 * `config_json` must be null or nul-terminated; `beta_true` null or
 * holding `len` values.
 */
enum EcoStatus eco_simulate(const char *config_json,
                            uint64_t seed,
                            struct EcoDataset **out,
                            double *beta_true,
                            size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECOINFER_H */
