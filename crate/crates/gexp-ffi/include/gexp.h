/* C interface to the gexp engine.
 *
 * Every function returns a GexpStatus; on any value other than GEXP_STATUS_OK
 * the thread-local message from gexp_last_error() describes the failure.
 * Strings returned through char** out-parameters are owned by the caller and
 * must be released with gexp_string_free(); GexpTheta handles must be
 * released with gexp_theta_free().
 *
 * Generated by cbindgen from crates/gexp-ffi — do not edit by hand.
 */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code returned by every function in the gexp C ABI.
//
// Anything other than `Ok` leaves a thread-local description readable via
// `gexp_last_error()`.
typedef enum GexpStatus {
  // The call succeeded.
  GEXP_STATUS_OK = 0,
  // A computation was attempted and failed (numerical blow-up, density
  // overflow, I/O, …).
  GEXP_STATUS_RUNTIME = 1,
  // The request itself is malformed: bad JSON, schema violation, or an
  // argument outside its documented domain.
  GEXP_STATUS_CONFIG = 2,
  // A required pointer argument was NULL.
  GEXP_STATUS_NULL_POINTER = 3,
  // A panic was caught at the boundary; state may be inconsistent and the
  // process should treat the library as poisoned.
  GEXP_STATUS_PANIC = 4,
  // A string argument was not valid UTF-8.
  GEXP_STATUS_UTF8 = 5,
} GexpStatus;

// Opaque handle to a bounded set of volatility matrices (the Θ of the
// sublinear expectation). Create via the `gexp_theta_*_new` constructors,
// release via `gexp_theta_free`.
typedef struct GexpTheta GexpTheta;

// Optional per-run overrides for `gexp_run_json`, mirroring the CLI's
// `--seed` and `--paths` flags. Pass NULL to run the config as written.
typedef struct GexpRunOverrides {
  // When true, `seed` replaces the config's seed.
  bool has_seed;
  // Replacement seed; ignored unless `has_seed` is true.
  uint64_t seed;
  // Replacement Monte Carlo path count; 0 means "no override".
  size_t paths;
} GexpRunOverrides;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the library version as a static NUL-terminated string.
// The pointer is valid for the lifetime of the process; do not free it.
const char *gexp_version(void);

// Returns the thread-local message describing the most recent failure on
// this thread, or NULL if the last call succeeded. The pointer stays valid
// until the next gexp call on the same thread; do not free it.
const char *gexp_last_error(void);

// Releases a string previously returned through a `char**` out-parameter.
// NULL is accepted and ignored.
//
// # Safety
// `s` must be NULL or a pointer obtained from this library's out-parameters,
// passed at most once.
void gexp_string_free(char *s);

// Creates a single-matrix (classical) uncertainty set from a row-major
// `dim x dim` buffer.
//
// # Safety
// `entries_row_major` must point to `dim * dim` readable doubles;
// `out_theta` must be a valid pointer to a `GexpTheta*` slot.
enum GexpStatus gexp_theta_singleton_new(size_t dim,
                                         const double *entries_row_major,
                                         struct GexpTheta **out_theta);

// Creates the one-dimensional interval set σ ∈ [sigma_low, sigma_high].
//
// # Safety
// `out_theta` must be a valid pointer to a `GexpTheta*` slot.
enum GexpStatus gexp_theta_interval1d_new(double sigma_low,
                                          double sigma_high,
                                          struct GexpTheta **out_theta);

// Creates a finite uncertainty set from `n_members` row-major `dim x dim`
// matrices stored back to back (member-major).
//
// # Safety
// `entries_row_major` must point to `n_members * dim * dim` readable
// doubles; `out_theta` must be a valid pointer to a `GexpTheta*` slot.
enum GexpStatus gexp_theta_finite_new(size_t dim,
                                      size_t n_members,
                                      const double *entries_row_major,
                                      struct GexpTheta **out_theta);

// Attaches a nondegeneracy floor σ₀ (γγᵀ ⪰ σ₀·I across the set), validating
// it against the smallest eigenvalue over the members. On failure the
// handle is left unchanged.
//
// # Safety
// `theta` must be a live handle from a `gexp_theta_*_new` constructor.
enum GexpStatus gexp_theta_set_floor(struct GexpTheta *theta, double sigma0);

// Writes the spatial dimension of the set into `out_dim`.
//
// # Safety
// `theta` must be a live handle; `out_dim` must be a valid pointer.
enum GexpStatus gexp_theta_dim(const struct GexpTheta *theta, size_t *out_dim);

// Releases a handle created by a `gexp_theta_*_new` constructor.
// NULL is accepted and ignored.
//
// # Safety
// `theta` must be NULL or a live handle, passed at most once.
void gexp_theta_free(struct GexpTheta *theta);

// Evaluates the generator G(A) = sup over the set of ½·tr(γγᵀA) for a
// symmetric `dim x dim` matrix `A` given row-major.
//
// # Safety
// `theta` must be a live handle; `a_row_major` must point to `dim * dim`
// readable doubles where `dim` matches the handle; `out_value` must be a
// valid pointer.
enum GexpStatus gexp_g_function(const struct GexpTheta *theta,
                                const double *a_row_major,
                                double *out_value);

// Parses and validates a run configuration without executing it. Returns
// `Ok` when the config would be accepted by `gexp_run_json`.
//
// # Safety
// `config_json` must be a NUL-terminated string.
enum GexpStatus gexp_config_validate(const char *config_json);

// Runs one experiment from a JSON configuration and hands back the full
// JSON report (envelope with config hash, seed, and results). `overrides`
// may be NULL; `out_pass` may be NULL if the caller only wants the report,
// otherwise it receives the report's pass verdict. Per-path CSV dumping is
// a CLI concern and is not exposed here.
//
// The report string is owned by the caller: release with
// `gexp_string_free`.
//
// # Safety
// `config_json` must be a NUL-terminated string; `overrides` NULL or a
// valid pointer; `out_report_json` a valid pointer to a `char*` slot;
// `out_pass` NULL or a valid pointer.
enum GexpStatus gexp_run_json(const char *config_json,
                              const struct GexpRunOverrides *overrides,
                              char **out_report_json,
                              bool *out_pass);

// Caps the global worker pool used by all subsequent runs in this process.
// Must be called before the first run (the pool is created lazily and then
// fixed); later calls fail with `Runtime`.
enum GexpStatus gexp_set_threads(size_t n_threads);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
