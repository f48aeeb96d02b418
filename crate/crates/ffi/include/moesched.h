#ifndef MOESCHED_H
#define MOESCHED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MoeStatus {
  MOE_STATUS_OK = 0,
  MOE_STATUS_NULL_POINTER = 1,
  MOE_STATUS_INVALID_ARGUMENT = 2,
  MOE_STATUS_INVALID_CONFIG = 3,
  MOE_STATUS_IO = 4,
  MOE_STATUS_FORMAT = 5,
  MOE_STATUS_CHECKSUM_MISMATCH = 6,
  MOE_STATUS_VERSION_MISMATCH = 7,
  MOE_STATUS_UNKNOWN_SCENARIO = 8,
  MOE_STATUS_RUNTIME = 9,
  MOE_STATUS_PANIC = 10,
} MoeStatus;

/**
 * The timeline and metrics of one simulation.
 */
typedef struct MoeSimResult MoeSimResult;

/**
 * A routing trace.
 */
typedef struct MoeTrace MoeTrace;

/**
 * Latency constants in microsecond ticks.
 */
typedef struct MoeCostParams {
  uint64_t t_io;
  uint64_t t_g;
  uint64_t t_attn;
  double beta;
  double startup;
} MoeCostParams;

typedef struct MoeMetrics {
  uint64_t makespan;
  double decode_latency;
  double throughput;
  double io_busy_fraction;
  double gpu_idle_fraction;
  uint64_t num_stages;
  uint64_t num_events;
} MoeMetrics;

typedef struct MoeCostFit {
  double beta;
  double startup;
  double r_squared;
} MoeCostFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or `NULL` after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *moesched_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *moesched_version(void);

/**
 * Generates a trace from a TOML config with `model`, `batch_size` and an
 * optional `[trace]` table.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MoeStatus moesched_trace_generate(const char *config_toml,
                                       uint64_t seed,
                                       struct MoeTrace **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MoeStatus moesched_trace_load(const char *path, struct MoeTrace **out);

/**
 * # Safety
 * `trace` must come from this library; `path` must be NUL-terminated.
 */
enum MoeStatus moesched_trace_save(const struct MoeTrace *trace, const char *path);

/**
 * Tokens in the trace (iterations x batch size); 0 for `NULL`.
 *
 * # Safety
 * `trace` must be `NULL` or come from this library.
 */
uint64_t moesched_trace_num_tokens(const struct MoeTrace *trace);

/**
 * # Safety
 * `trace` must be `NULL` or come from this library, and not be used after.
 */
void moesched_trace_free(struct MoeTrace *trace);

/**
 * Simulates `trace` under `policy` (`presched`, `greedy`, `ondemand`,
 * `fixed:<c>`, `oracle`) with predictions from `predictor` (`stats`, `gate`,
 * `oracle_noise:<rate>`, `llapor:<checkpoint>`). Frequency tables and the
 * residency plan come from `profile`, or from `trace` when it is `NULL`.
 *
 * # Safety
 * Handles must come from this library; strings must be NUL-terminated;
 * `params` and `out` must be valid pointers.
 */
enum MoeStatus moesched_simulate(const struct MoeTrace *trace,
                                 const struct MoeTrace *profile,
                                 const char *policy,
                                 const char *predictor,
                                 const struct MoeCostParams *params,
                                 uint64_t residency_budget_bytes,
                                 uint64_t seed,
                                 struct MoeSimResult **out);

/**
 * # Safety
 * `result` must come from this library and `out` be a valid pointer.
 */
enum MoeStatus moesched_sim_metrics(const struct MoeSimResult *result, struct MoeMetrics *out);

/**
 * Writes the timeline as line-delimited JSON.
 *
 * # Safety
 * `result` must come from this library; `path` must be NUL-terminated.
 */
enum MoeStatus moesched_sim_save_timeline(const struct MoeSimResult *result, const char *path);

/**
 * # Safety
 * `result` must be `NULL` or come from this library, and not be used after.
 */
void moesched_sim_free(struct MoeSimResult *result);

/**
 * Least-squares fit of `ticks = beta * tokens + startup` over `n` samples.
 *
 * # Safety
 * `tokens` and `ticks` must point to `n` elements; `out` must be valid.
 */
enum MoeStatus moesched_fit_cost(const uint32_t *tokens,
                                 const double *ticks,
                                 size_t n,
                                 struct MoeCostFit *out);

/**
 * Replays a hand-derived scenario; `*passed` tells whether every run
 * matched tick for tick.
 *
 * # Safety
 * `id` must be NUL-terminated and `passed` a valid pointer.
 */
enum MoeStatus moesched_replay_golden(const char *id, bool *passed);

/**
 * Runs an experiment grid from a TOML config file into `out_dir` (or the
 * config's `out_dir` when `NULL`). Failed cells do not fail the call; their
 * count goes to `*failed_cells`.
 *
 * # Safety
 * Strings must be NUL-terminated (`out_dir` may be `NULL`); `failed_cells`
 * must be a valid pointer.
 */
enum MoeStatus moesched_run_experiment(const char *config_path,
                                       const char *out_dir,
                                       size_t *failed_cells);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOESCHED_H */
