#ifndef MKVLSV_H
#define MKVLSV_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MkvStatus {
  MKV_STATUS_OK = 0,
  MKV_STATUS_INVALID_ARGUMENT = 1,
  MKV_STATUS_VALIDATION = 2,
  MKV_STATUS_RUNTIME = 3,
  MKV_STATUS_NULL_POINTER = 4,
  MKV_STATUS_PANIC = 5,
} MkvStatus;

/**
 * Validated model specification.
 */
typedef struct MkvModel MkvModel;

/**
 * Completed simulation with its recorded snapshots.
 */
typedef struct MkvRun MkvRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *mkv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mkv_version(void);

/**
 * Black-Scholes call price with zero rates.
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum MkvStatus mkv_bs_call_price(double spot,
                                 double vol,
                                 double maturity,
                                 double strike,
                                 double *out);

/**
 * Builds and validates a model from its JSON description.
 *
 * Relative file paths inside the JSON resolve against the working directory.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MkvStatus mkv_model_from_json(const char *json, struct MkvModel **out);

/**
 * # Safety
 * `model` must come from [`mkv_model_from_json`] and not be used afterwards.
 */
void mkv_model_free(struct MkvModel *model);

/**
 * Uniform ellipticity bounds `m <= eig(a) <= M` over the standard validation grid.
 *
 * # Safety
 * `model` must be a live handle; `m` and `big_m` valid pointers.
 */
enum MkvStatus mkv_model_check_ellipticity(const struct MkvModel *model,
                                           double horizon,
                                           double *m,
                                           double *big_m);

/**
 * Simulates the interacting system, recording the initial and terminal states.
 *
 * A non-positive `bandwidth` selects the automatic rule. `workers == 0` uses the default pool.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum MkvStatus mkv_simulate(const struct MkvModel *model,
                            size_t particles,
                            size_t steps,
                            double horizon,
                            double bandwidth,
                            uint64_t seed,
                            size_t workers,
                            struct MkvRun **out);

/**
 * # Safety
 * `run` must come from [`mkv_simulate`] and not be used afterwards.
 */
void mkv_run_free(struct MkvRun *run);

/**
 * Number of particles in the run, 0 for a NULL handle.
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
size_t mkv_run_particles(const struct MkvRun *run);

/**
 * Copies terminal `(x1, x2)` in particle order. Both buffers hold `len` doubles.
 *
 * # Safety
 * `run` must be a live handle; `x1` and `x2` must hold `len` doubles.
 */
enum MkvStatus mkv_run_terminal(const struct MkvRun *run, double *x1, double *x2, size_t len);

/**
 * Bandwidth used at `step` (0-based).
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum MkvStatus mkv_run_bandwidth(const struct MkvRun *run, size_t step, double *out);

/**
 * Reprices calls on the terminal snapshot. `targets` may be NULL.
 *
 * # Safety
 * `run` must be a live handle; `strikes`, `prices`, `stderrs` (and `targets` if set) hold `n` doubles.
 */
enum MkvStatus mkv_run_reprice(const struct MkvRun *run,
                               const double *strikes,
                               const double *targets,
                               size_t n,
                               double *prices,
                               double *stderrs);

/**
 * Order-`e` Wasserstein distance between two 1D samples.
 *
 * # Safety
 * `a` holds `na` doubles, `b` holds `nb`, `out` is a valid pointer.
 */
enum MkvStatus mkv_wasserstein_1d(const double *a,
                                  size_t na,
                                  const double *b,
                                  size_t nb,
                                  double e,
                                  double *out);

/**
 * Local volatility from a row-major (maturity, strike) call price grid.
 *
 * # Safety
 * `maturities` holds `nt` doubles, `strikes` `nk`, `prices` and `out` `nt * nk`.
 */
enum MkvStatus mkv_dupire(double spot,
                          const double *maturities,
                          size_t nt,
                          const double *strikes,
                          size_t nk,
                          const double *prices,
                          double vol_min,
                          double vol_max,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MKVLSV_H */
