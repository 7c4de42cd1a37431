#ifndef JLBO_H
#define JLBO_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum JlboStatus {
  JLBO_STATUS_OK = 0,
  JLBO_STATUS_NULL_POINTER = 1,
  JLBO_STATUS_INVALID_ARGUMENT = 2,
  JLBO_STATUS_INVALID_CONFIG = 3,
  JLBO_STATUS_ASSUMPTION_REFUSED = 4,
  JLBO_STATUS_NUMERICAL = 5,
  JLBO_STATUS_IO = 6,
  JLBO_STATUS_OUT_OF_RANGE = 7,
  JLBO_STATUS_PANIC = 8,
} JlboStatus;

typedef enum JlboAlgorithm {
  JLBO_ALGORITHM_JLBO = 0,
  JLBO_ALGORITHM_RANDOM = 1,
  JLBO_ALGORITHM_FIXED_RIS = 2,
} JlboAlgorithm;

/**
 * Run configuration.
 */
typedef struct JlboConfig JlboConfig;

/**
 * Records of one finished sweep.
 */
typedef struct JlboResults JlboResults;

/**
 * One row of the per-iteration trace. Failed runs have iteration 0 and NaN
 * metrics.
 */
typedef struct JlboRecord {
  uint64_t trial;
  uint64_t seed;
  double sweep_value;
  uint64_t iteration;
  enum JlboAlgorithm algorithm;
  double nmse_position;
  double nmse_kappa;
  double crlb_total;
  double residual;
  double wall_ms;
} JlboRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *jlbo_last_error(void);

/**
 * Static version string.
 */
const char *jlbo_version(void);

/**
 * New config from the `desk` or `paper` profile.
 *
 * # Safety
 * `profile` is a NUL-terminated string; `out` is writable.
 */
enum JlboStatus jlbo_config_new(const char *profile, struct JlboConfig **out);

/**
 * Lays the flat TOML keys of `text` over `cfg`.
 *
 * # Safety
 * `cfg` is a live handle; `text` is a NUL-terminated string.
 */
enum JlboStatus jlbo_config_apply_toml(struct JlboConfig *cfg, const char *text);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum JlboStatus jlbo_config_set_seed(struct JlboConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum JlboStatus jlbo_config_set_trials(struct JlboConfig *cfg, uint64_t trials);

/**
 * `axis` is `iterations`, `n_ris`, `snr` or `bs_ris_distance`.
 *
 * # Safety
 * `cfg` is a live handle; `axis` is a NUL-terminated string.
 */
enum JlboStatus jlbo_config_set_sweep(struct JlboConfig *cfg, const char *axis);

/**
 * # Safety
 * `cfg` is NULL or a handle from [`jlbo_config_new`] not yet freed.
 */
void jlbo_config_free(struct JlboConfig *cfg);

/**
 * Runs the sweep described by `cfg`.
 *
 * # Safety
 * `cfg` is a live handle; `out` is writable.
 */
enum JlboStatus jlbo_run(const struct JlboConfig *cfg, struct JlboResults **out);

/**
 * Number of records, or 0 for a NULL handle.
 *
 * # Safety
 * `res` is NULL or a live handle.
 */
uint64_t jlbo_results_len(const struct JlboResults *res);

/**
 * Number of failed runs, or 0 for a NULL handle.
 *
 * # Safety
 * `res` is NULL or a live handle.
 */
uint64_t jlbo_results_failures(const struct JlboResults *res);

/**
 * Copies record `index` into `out`.
 *
 * # Safety
 * `res` is a live handle; `out` is writable.
 */
enum JlboStatus jlbo_results_get(const struct JlboResults *res,
                                 uint64_t index,
                                 struct JlboRecord *out);

/**
 * Writes the results to `path` as `csv`, `json` or `svg`.
 *
 * # Safety
 * `res` is a live handle; `format` and `path` are NUL-terminated strings.
 */
enum JlboStatus jlbo_results_write(const struct JlboResults *res,
                                   const char *format,
                                   const char *path);

/**
 * # Safety
 * `res` is NULL or a handle from [`jlbo_run`] not yet freed.
 */
void jlbo_results_free(struct JlboResults *res);

/**
 * `||est - truth||^2 / ||truth||^2` over `len` entries.
 *
 * # Safety
 * `est` and `truth` point to `len` readable doubles; `out` is writable.
 */
enum JlboStatus jlbo_nmse(const double *est, const double *truth, uint64_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JLBO_H */
