/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SPO_FFI_H
#define SPO_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The numbering of 2..4 matches the `spo` exit codes.
 */
typedef enum SpoStatus {
  SPO_STATUS_OK = 0,
  SPO_STATUS_NULL_POINTER = 1,
  SPO_STATUS_INVALID = 2,
  SPO_STATUS_NOT_CONVERGED = 3,
  SPO_STATUS_IO = 4,
  SPO_STATUS_PANIC = 5,
} SpoStatus;

/**
 * A relocation instance with an optional free-vehicle forecast.
 */
typedef struct SpoInstance SpoInstance;

/**
 * Result of one solve.
 */
typedef struct SpoSolution SpoSolution;

/**
 * Solver settings. Obtain defaults from `spo_admm_options_default`.
 */
typedef struct SpoAdmmOptions {
  double rho;
  double xi;
  size_t k_max;
  /**
   * KKT residuals must also fall below `kkt_factor * xi`; 0 disables.
   */
  double kkt_factor;
} SpoAdmmOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *spo_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into the library from the same thread.
 */
const char *spo_last_error_message(void);

struct SpoAdmmOptions spo_admm_options_default(void);

/**
 * Builds an instance from raw arrays. `supply` and `target` hold `n`
 * values, `travel_time` and `cost` hold `n * n`. `predicted_free` may be
 * NULL (treated as zero).
 *
 * # Safety
 * Non-null pointers must reference arrays of the stated lengths.
 */
enum SpoStatus spo_instance_new(size_t n,
                                const double *supply,
                                const double *target,
                                const double *travel_time,
                                const double *cost,
                                double budget,
                                double interval,
                                const double *predicted_free,
                                struct SpoInstance **out);

/**
 * Parses an instance from the JSON document accepted by `spo solve-once`.
 *
 * # Safety
 * `json` must be a NUL-terminated string.
 */
enum SpoStatus spo_instance_from_json(const char *json, struct SpoInstance **out);

/**
 * # Safety
 * `inst` must come from `spo_instance_new` or `spo_instance_from_json` and
 * not have been freed. NULL is ignored.
 */
void spo_instance_free(struct SpoInstance *inst);

/**
 * # Safety
 * `inst` must be a live handle.
 */
size_t spo_instance_n_grids(const struct SpoInstance *inst);

/**
 * Solves the relocation program. `options` may be NULL for defaults.
 * Returns `NotConverged` when the iteration cap is hit; the last iterate is
 * still written to `out` and must be freed.
 *
 * # Safety
 * `inst` must be a live handle, `out` a valid pointer.
 */
enum SpoStatus spo_solve(const struct SpoInstance *inst,
                         const struct SpoAdmmOptions *options,
                         struct SpoSolution **out);

/**
 * # Safety
 * `sol` must come from `spo_solve` and not have been freed. NULL is ignored.
 */
void spo_solution_free(struct SpoSolution *sol);

/**
 * Number of flow entries, `n * n`.
 *
 * # Safety
 * `sol` must be a live handle.
 */
size_t spo_solution_len(const struct SpoSolution *sol);

/**
 * Copies the flows into `buf`, which must hold `spo_solution_len` values.
 *
 * # Safety
 * `buf` must be writable for `len` values.
 */
enum SpoStatus spo_solution_flows(const struct SpoSolution *sol, double *buf, size_t len);

/**
 * # Safety
 * `sol` must be a live handle.
 */
bool spo_solution_converged(const struct SpoSolution *sol);

/**
 * # Safety
 * `sol` must be a live handle.
 */
size_t spo_solution_iterations(const struct SpoSolution *sol);

/**
 * Matching objective `½‖arrivals − required‖²`. NaN for NULL.
 *
 * # Safety
 * `sol` must be a live handle.
 */
double spo_solution_objective(const struct SpoSolution *sol);

/**
 * Total incentive spent by the plan. NaN for NULL.
 *
 * # Safety
 * `sol` must be a live handle.
 */
double spo_solution_spend(const struct SpoSolution *sol);

/**
 * Largest constraint violation of the plan. NaN for NULL.
 *
 * # Safety
 * `sol` must be a live handle.
 */
double spo_solution_max_violation(const struct SpoSolution *sol);

/**
 * Root mean squared error between matched and target distributions.
 *
 * # Safety
 * Both arrays must hold `len` values; `out` must be writable.
 */
enum SpoStatus spo_rmse(const double *matched, const double *target, size_t len, double *out);

/**
 * Symmetric mean absolute percentage error, in percent.
 *
 * # Safety
 * Both arrays must hold `len` values; `out` must be writable.
 */
enum SpoStatus spo_smape(const double *matched, const double *target, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPO_FFI_H */
