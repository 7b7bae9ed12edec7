#ifndef JYS_FFI_H
#define JYS_FFI_H

/* Generated by cbindgen from the jys-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  JYS_STATUS_OK = 0,
  /**
   * Invalid arguments or configuration.
   */
  JYS_STATUS_USAGE = 1,
  /**
   * A verification check failed.
   */
  JYS_STATUS_VERIFICATION = 2,
  /**
   * Numerical failure (integration, search, support mismatch, ...).
   */
  JYS_STATUS_NUMERICAL = 3,
  /**
   * A required pointer was null.
   */
  JYS_STATUS_NULL_POINTER = 4,
  /**
   * Internal panic; the library state is still consistent.
   */
  JYS_STATUS_PANIC = 5,
} JysStatus;

/**
 * Opaque data-distribution handle.
 */
typedef struct JysData JysData;

/**
 * Opaque forward-kernel handle.
 */
typedef struct JysKernel JysKernel;

/**
 * Opaque exact-oracle handle.
 */
typedef struct JysOracle JysOracle;

/**
 * Opaque schedule handle.
 */
typedef struct JysSchedule JysSchedule;

/**
 * Copy the last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length excluding the terminator.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (then only the
 * required length is returned).
 */
uintptr_t jys_last_error_message(char *buf, uintptr_t len);

/**
 * Release a string allocated by this library.
 *
 * # Safety
 * `s` must have been returned by a jys function and not freed before.
 */
void jys_string_free(char *s);

/**
 * Create a forward kernel. `family`: 0 = uniform, 1 = absorbing,
 * 2 = gaussian. Returns null on error (see `jys_last_error_message`).
 */
JysKernel *jys_kernel_new(int family,
                          uintptr_t vocab_size,
                          double eps_min,
                          double horizon,
                          double gaussian_bandwidth,
                          uintptr_t gaussian_truncation);

/**
 * # Safety
 * `kernel` must be a live handle from `jys_kernel_new`.
 */
void jys_kernel_free(JysKernel *kernel);

/**
 * Exact countdown data law.
 */
JysData *jys_data_countdown(uintptr_t seq_len, uintptr_t value_count);

/**
 * Parse a data-distribution JSON document (`{"explicit": ...}` or
 * `{"markov": ...}`).
 *
 * # Safety
 * `json` must be a valid NUL-terminated UTF-8 string.
 */
JysData *jys_data_from_json(const char *json);

/**
 * # Safety
 * `data` must be a live handle from a `jys_data_*` constructor.
 */
void jys_data_free(JysData *data);

/**
 * Build the exact reverse oracle from a kernel and a data law (both are
 * copied; the input handles stay owned by the caller). `support_smoothing`
 * blends the data law locally toward uniform; pass 0 for the strict oracle.
 *
 * # Safety
 * `kernel` and `data` must be live handles.
 */
JysOracle *jys_oracle_new(const JysKernel *kernel, const JysData *data, double support_smoothing);

/**
 * # Safety
 * `oracle` must be a live handle from `jys_oracle_new`.
 */
void jys_oracle_free(JysOracle *oracle);

/**
 * Uniform schedule with `nfe` equal intervals over `[t_min, horizon]`.
 */
JysSchedule *jys_schedule_uniform(double horizon, double t_min, uintptr_t nfe);

/**
 * Optimize a schedule by hierarchical breakdown: `rounds` splits giving
 * `2^rounds` intervals. `objective`: 0 = sampled refinement bound,
 * 1 = exact path KL (enumerable spaces), 2 = exact endpoint KL (enumerable
 * spaces).
 *
 * # Safety
 * `oracle` must be a live handle.
 */
JysSchedule *jys_schedule_optimize(const JysOracle *oracle,
                                   uint32_t rounds,
                                   double t_min,
                                   uintptr_t num_samples,
                                   uint64_t seed,
                                   int objective);

/**
 * Number of timesteps (intervals + 1).
 *
 * # Safety
 * `schedule` must be a live handle.
 */
uintptr_t jys_schedule_len(const JysSchedule *schedule);

/**
 * Copy the decreasing timesteps into `out`.
 *
 * # Safety
 * `schedule` must be live and `out` must hold `len` doubles.
 */
JysStatus jys_schedule_timesteps(const JysSchedule *schedule, double *out, uintptr_t len);

/**
 * Serialize a schedule (with the kernel when provided) to the on-disk JSON
 * format; free the result with `jys_string_free`.
 *
 * # Safety
 * Handles must be live; `kernel` may be null.
 */
char *jys_schedule_to_json(const JysSchedule *schedule, const JysKernel *kernel, uint64_t seed);

/**
 * Parse a schedule JSON document.
 *
 * # Safety
 * `json` must be a valid NUL-terminated UTF-8 string.
 */
JysSchedule *jys_schedule_from_json(const char *json);

/**
 * # Safety
 * `schedule` must be a live handle.
 */
void jys_schedule_free(JysSchedule *schedule);

/**
 * Draw `ensemble` sequences by τ-leaping along the schedule, applying the
 * most-likely-token readout at the cutoff. Tokens are written row-major
 * into `out` (`ensemble × seq_len`). `step_kernel`: 0 = Euler,
 * 1 = hold-rate.
 *
 * # Safety
 * `oracle` and `schedule` must be live; `out` must hold
 * `ensemble * jys_oracle_num_dims(oracle)` entries.
 */
JysStatus jys_sample_sequences(const JysOracle *oracle,
                               const JysSchedule *schedule,
                               uintptr_t ensemble,
                               uint64_t seed,
                               int step_kernel,
                               uint32_t *out,
                               uintptr_t out_len);

/**
 * Sequence length of the oracle's data law.
 *
 * # Safety
 * `oracle` must be a live handle.
 */
uintptr_t jys_oracle_num_dims(const JysOracle *oracle);

/**
 * Per-pair countdown violation rate of row-major `tokens`
 * (`n_sequences × seq_len`).
 *
 * # Safety
 * `tokens` must hold `n_sequences * seq_len` entries.
 */
JysStatus jys_violation_rate(const uint32_t *tokens,
                             uintptr_t n_sequences,
                             uintptr_t seq_len,
                             uintptr_t value_count,
                             double *out);

/**
 * One refinement-bound estimate for the split `s → t → u`.
 *
 * # Safety
 * `oracle` must be live; `out_value`/`out_stderr` must be writable.
 */
JysStatus jys_klub_refinement(const JysOracle *oracle,
                              double s,
                              double t,
                              double u,
                              uintptr_t num_samples,
                              uint64_t seed,
                              double *out_value,
                              double *out_stderr);

/**
 * Run the quick verification suite; returns `JYS_STATUS_OK` when every
 * check passes and `JYS_STATUS_VERIFICATION` when any fails.
 */
JysStatus jys_verify_quick(void);

#endif  /* JYS_FFI_H */
