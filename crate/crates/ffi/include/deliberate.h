#ifndef DELIBERATE_H
#define DELIBERATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DlbStatus {
  DLB_STATUS_OK = 0,
  DLB_STATUS_NULL_POINTER = 1,
  DLB_STATUS_INVALID_ARGUMENT = 2,
  DLB_STATUS_IO = 3,
  DLB_STATUS_VALIDATION = 4,
  /**
   * The estimate was produced but the optimiser did not converge.
   */
  DLB_STATUS_NOT_CONVERGED = 5,
  DLB_STATUS_PANIC = 6,
} DlbStatus;

/**
 * Loaded dataset.
 */
typedef struct DlbDataset DlbDataset;

/**
 * Estimation result.
 */
typedef struct DlbResult DlbResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty when none. Valid until the next call on this thread.
 */
const char *dlb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dlb_version(void);

/**
 * Loads the three input files.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum DlbStatus dlb_dataset_load(const char *ratings,
                                const char *individuals,
                                const char *schedule,
                                struct DlbDataset **out);

/**
 * # Safety
 * `dataset` must come from [`dlb_dataset_load`] and not be used afterwards; null is ignored.
 */
void dlb_dataset_free(struct DlbDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null (returns 0).
 */
size_t dlb_dataset_individuals(const struct DlbDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null (returns 0).
 */
size_t dlb_dataset_observations(const struct DlbDataset *dataset);

/**
 * Estimates the model; `config_toml` may be null for the defaults. On
 * `DLB_STATUS_NOT_CONVERGED` the result is still written to `out`.
 *
 * # Safety
 * `dataset` must be a live handle, `config_toml` null or NUL-terminated, `out` writable.
 */
enum DlbStatus dlb_estimate(const struct DlbDataset *dataset,
                            const char *config_toml,
                            struct DlbResult **out);

/**
 * # Safety
 * `result` must come from [`dlb_estimate`] and not be used afterwards; null is ignored.
 */
void dlb_result_free(struct DlbResult *result);

/**
 * # Safety
 * `result` must be a live handle or null (returns 0).
 */
size_t dlb_result_parameter_count(const struct DlbResult *result);

/**
 * Estimate and robust standard error of parameter `index`; the error is NaN for pinned parameters.
 *
 * # Safety
 * `result` must be a live handle; `estimate` and `robust_se` writable or null.
 */
enum DlbStatus dlb_result_parameter(const struct DlbResult *result,
                                    size_t index,
                                    double *estimate,
                                    double *robust_se);

/**
 * Name of parameter `index` as a new string (free with [`dlb_string_free`]).
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum DlbStatus dlb_result_parameter_name(const struct DlbResult *result, size_t index, char **out);

/**
 * # Safety
 * `result` must be a live handle or null (returns NaN).
 */
double dlb_result_loglik(const struct DlbResult *result);

/**
 * 1 when the optimiser converged, 0 otherwise or for null.
 *
 * # Safety
 * `result` must be a live handle or null.
 */
int dlb_result_converged(const struct DlbResult *result);

/**
 * Full result as JSON (free with [`dlb_string_free`]).
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum DlbStatus dlb_result_to_json(const struct DlbResult *result, char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards; null is ignored.
 */
void dlb_string_free(char *s);

/**
 * Share of a workshop effect reverted `delta` days later.
 *
 * # Safety
 * `out` must be writable.
 */
enum DlbStatus dlb_decay(double delta, double alpha, double horizon, double *out);

/**
 * Category probabilities for latent value `v` and ten increasing thresholds.
 *
 * # Safety
 * `tau` must point at 10 doubles and `out` at room for 11.
 */
enum DlbStatus dlb_ordered_probs(double v, const double *tau, double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum DlbStatus dlb_inverse_normal_cdf(double u, double *out);

/**
 * Two-sided paired t-test on `n` differences.
 *
 * # Safety
 * `differences` must point at `n` doubles; `t` and `p` writable or null.
 */
enum DlbStatus dlb_paired_t_test(const double *differences, size_t n, double *t, double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELIBERATE_H */
