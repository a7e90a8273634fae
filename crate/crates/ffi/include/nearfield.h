#ifndef NEARFIELD_H
#define NEARFIELD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NfStatus {
  NF_STATUS_OK = 0,
  NF_STATUS_NULL_POINTER = 1,
  NF_STATUS_INVALID_ARGUMENT = 2,
  NF_STATUS_BUFFER_TOO_SMALL = 3,
  // The estimator ran but could not produce a result.
  NF_STATUS_ESTIMATION_FAILED = 4,
  NF_STATUS_IO = 5,
  // A Rust panic was caught at the boundary.
  NF_STATUS_INTERNAL = 6,
} NfStatus;

// Result of one estimation call.
typedef struct NfEstimate NfEstimate;

// A drawn LoS scenario: users, pilots and combiner.
typedef struct NfScenario NfScenario;

typedef struct NfSystemConfig {
  size_t n_antennas;
  size_t n_rf;
  size_t n_subcarriers;
  size_t n_symbols;
  size_t n_users;
  double carrier_hz;
  double bandwidth_hz;
} NfSystemConfig;

typedef struct NfComplex {
  double re;
  double im;
} NfComplex;

// One propagation path. `angle` is in radians, `range` in meters.
typedef struct NfPath {
  struct NfComplex gain;
  double delay;
  double angle;
  double range;
} NfPath;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` as a
// NUL-terminated string. `needed` (optional) receives the full size
// including the terminator; `BufferTooSmall` is returned if it does not fit.
//
// # Safety
// `buf` must point to `len` writable bytes (or be null with `len == 0`).
enum NfStatus nf_last_error(char *buf, size_t len, size_t *needed);

// Rayleigh distance `2D²/λ` of the array described by `cfg`, in meters.
//
// # Safety
// Pointers must be valid or null.
enum NfStatus nf_rayleigh_distance(const struct NfSystemConfig *cfg, double *distance);

// Draws a LoS scenario (user positions, gains, pilots and a random
// combiner) from `seed`.
//
// # Safety
// Pointers must be valid or null. `*scenario` receives a new object.
enum NfStatus nf_scenario_new_los(const struct NfSystemConfig *cfg,
                                  uint64_t seed,
                                  struct NfScenario **scenario);

// Releases a scenario. Null is ignored.
//
// # Safety
// `scenario` must come from `nf_scenario_new_los` and not be used afterwards.
void nf_scenario_free(struct NfScenario *scenario);

// Tensor dimensions `(P, M, T)` of the observations of a scenario.
//
// # Safety
// Pointers must be valid or null.
enum NfStatus nf_scenario_dims(const struct NfScenario *scenario, size_t *p, size_t *m, size_t *t);

// True LoS path of `user`.
//
// # Safety
// Pointers must be valid or null.
enum NfStatus nf_scenario_user(const struct NfScenario *scenario, size_t user, struct NfPath *path);

// Received tensor `Y[p, m, t]` at index `p + P(m + M t)`. Noise at
// `snr_db` is drawn from `seed`; pass infinity for noiseless data.
//
// # Safety
// `y` must point to `len` writable elements.
enum NfStatus nf_scenario_observe(const struct NfScenario *scenario,
                                  double snr_db,
                                  uint64_t seed,
                                  struct NfComplex *y,
                                  size_t len);

// Per-user position CRB (m²) of the scenario at `snr_db`, written to
// `crb[0..n_users]`.
//
// # Safety
// `crb` must point to `len` writable elements.
enum NfStatus nf_crb_position(const struct NfScenario *scenario,
                              double snr_db,
                              double *crb,
                              size_t len);

// LoS estimation from observations `y` (layout as in
// `nf_scenario_observe`) using the pilots and combiner of `scenario`.
// `delay_aided` nonzero takes the range from the delay estimate.
//
// # Safety
// `y` must point to `len` readable elements. `*estimate` receives a new object.
enum NfStatus nf_estimate_los(struct NfScenario *scenario,
                              const struct NfComplex *y,
                              size_t len,
                              int32_t delay_aided,
                              struct NfEstimate **estimate);

// Releases an estimate. Null is ignored.
//
// # Safety
// `estimate` must come from `nf_estimate_los` and not be used afterwards.
void nf_estimate_free(struct NfEstimate *estimate);

// Estimated path and position `(x, y)` of `user`.
//
// # Safety
// Pointers must be valid or null.
enum NfStatus nf_estimate_user(const struct NfEstimate *estimate,
                               size_t user,
                               struct NfPath *path,
                               double *x,
                               double *y);

// Channel NMSE of `estimate` against the true channels of `scenario`.
//
// # Safety
// Pointers must be valid or null.
enum NfStatus nf_estimate_nmse(const struct NfEstimate *estimate,
                               const struct NfScenario *scenario,
                               double *nmse);

// Runs the experiment described by the TOML document `config_toml` and
// writes `results.csv`, `timings.csv` and `summary.csv` into `out_dir`.
// `threads == 0` uses one worker per core.
//
// # Safety
// Strings must be valid NUL-terminated UTF-8.
enum NfStatus nf_run_experiment(const char *config_toml, const char *out_dir, size_t threads);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEARFIELD_H */
