#ifndef TFRPROJ_H
#define TFRPROJ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TfrStatus {
  TFR_STATUS_OK = 0,
  TFR_STATUS_NULL_POINTER = 1,
  TFR_STATUS_INVALID_UTF8 = 2,
  // Bad data, configuration or arguments.
  TFR_STATUS_INPUT_ERROR = 3,
  // The computation failed.
  TFR_STATUS_COMPUTE_ERROR = 4,
  // The fit did not pass the convergence check.
  TFR_STATUS_CONVERGENCE_GATE = 5,
  TFR_STATUS_NOT_FOUND = 6,
  TFR_STATUS_PANIC = 7,
} TfrStatus;

typedef struct TfrFit TfrFit;

typedef struct TfrProjection TfrProjection;

typedef struct TfrStore TfrStore;

typedef struct TfrFitOptions {
  // Restrict the pool to countries at or below `low_threshold` in the
  // period starting at `low_reference_period`.
  bool low_pool;
  double low_threshold;
  int32_t low_reference_period;
  double phase3_threshold;
  size_t iterations;
  size_t burn_in;
  size_t thin;
  size_t chains;
  uint64_t seed;
} TfrFitOptions;

typedef struct TfrProjectOptions {
  int32_t horizon_end_year;
  size_t trajectories;
  uint64_t seed;
  // Project even if the convergence check fails.
  bool force;
} TfrProjectOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *tfr_last_error(void);

// Expected decrement of the double-logistic curve at level `f`.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_double_logistic(double f,
                                   double delta1,
                                   double delta2,
                                   double delta3,
                                   double delta4,
                                   double d,
                                   double *out);

// Parses CSV text with header `country_id,country_name,year,tfr`.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_store_parse_csv(const char *text, bool annual, struct TfrStore **out);

// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
void tfr_store_free(struct TfrStore *store);

// Number of countries; 0 for NULL.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
size_t tfr_store_len(const struct TfrStore *store);

// Phase boundaries of one country as observation indices. `phase3_start`
// is -1 when the country has not entered Phase III.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_store_classify(const struct TfrStore *store,
                                  const char *country_id,
                                  double threshold,
                                  size_t *phase2_start,
                                  int64_t *phase3_start);

// Options matching the command-line defaults.
struct TfrFitOptions tfr_fit_options_default(void);

// Samples both phases for the selected pool.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_fit(const struct TfrStore *store,
                       const struct TfrFitOptions *options,
                       struct TfrFit **out);

// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
void tfr_fit_free(struct TfrFit *fit);

// Number of pooled countries; 0 for NULL.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
size_t tfr_fit_pool_size(const struct TfrFit *fit);

// Largest potential scale reduction factor over the pool-level coordinates.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_fit_max_rhat(const struct TfrFit *fit, double *out);

struct TfrProjectOptions tfr_project_options_default(void);

// Projects one pooled country.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_project(const struct TfrStore *store,
                           const struct TfrFit *fit,
                           const char *country_id,
                           const struct TfrProjectOptions *options,
                           struct TfrProjection **out);

// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
void tfr_projection_free(struct TfrProjection *p);

// Number of projected periods; 0 for NULL.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
size_t tfr_projection_periods(const struct TfrProjection *p);

// First year of projected period `index`.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_projection_period_start(const struct TfrProjection *p,
                                           size_t index,
                                           int32_t *out);

// Quantile at `level` (one of 0.025, 0.1, 0.5, 0.9, 0.975) for period
// `index`.
//
// # Safety
// Pointer arguments must be NULL or point to live objects of the stated
// type; strings must be NUL-terminated.
enum TfrStatus tfr_projection_quantile(const struct TfrProjection *p,
                                       double level,
                                       size_t index,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TFRPROJ_H */
