#ifndef PLATOONSIM_H
#define PLATOONSIM_H

#pragma once

/* Generated by cbindgen. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum PsimMergeAlgorithm {
  PSIM_MERGE_ALGORITHM_HEURISTIC = 0,
  PSIM_MERGE_ALGORITHM_FUZZY = 1,
} PsimMergeAlgorithm;

typedef enum PsimStatus {
  PSIM_STATUS_OK = 0,
  PSIM_STATUS_NULL_ARGUMENT = 1,
  PSIM_STATUS_INVALID_UTF8 = 2,
  PSIM_STATUS_CONFIG = 3,
  PSIM_STATUS_SIMULATION = 4,
  PSIM_STATUS_NOT_RUN = 5,
  PSIM_STATUS_NOT_FOUND = 6,
  PSIM_STATUS_IO = 7,
  PSIM_STATUS_PANIC = 8,
} PsimStatus;

/**
 * Opaque simulation session.
 */
typedef struct PsimSession PsimSession;

/**
 * One simulation step of one vehicle.
 */
typedef struct PsimRecord {
  uint64_t step;
  double station;
  int32_t lane;
  double lateral_offset;
  double speed;
  double accel;
} PsimRecord;

/**
 * Per-vehicle metrics. NaN marks a value that is not defined for the vehicle.
 */
typedef struct PsimMetrics {
  double attc;
  uint32_t hazard_frequency;
  double avg_time_gap;
  double time_gap_std;
  double accel_std;
  double tcm;
  double maneuver_accel_std;
} PsimMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a session for a builtin scenario (`cycle1`, `cycle2`, `merge_join`).
 */
enum PsimStatus psim_session_builtin(const char *name, struct PsimSession **out);

/**
 * Creates a session from a YAML scenario file.
 */
enum PsimStatus psim_session_from_file(const char *path, struct PsimSession **out);

/**
 * Releases a session. Null is ignored.
 */
void psim_session_free(struct PsimSession *h);

/**
 * Sets both the traffic seed and the V2X channel seed. Clears previous results.
 */
enum PsimStatus psim_set_seed(struct PsimSession *h, uint64_t seed);

enum PsimStatus psim_set_steps(struct PsimSession *h, uint64_t steps);

/**
 * Per-recipient message drop probability in [0, 1].
 */
enum PsimStatus psim_set_channel_drop(struct PsimSession *h, double p);

/**
 * Merge-position algorithm used by every single CAV in the scenario, as a
 * `PsimMergeAlgorithm` value. Unknown values give `PSIM_STATUS_CONFIG`.
 */
enum PsimStatus psim_set_merge_algorithm(struct PsimSession *h, uint32_t algorithm);

/**
 * Runs the configured scenario to completion and evaluates it.
 */
enum PsimStatus psim_run(struct PsimSession *h);

/**
 * Number of vehicles that appeared during the run.
 */
enum PsimStatus psim_vehicle_count(const struct PsimSession *h, size_t *out);

/**
 * Id of the vehicle at `index`; `is_cav` is false for human-driven vehicles.
 */
enum PsimStatus psim_vehicle_at(const struct PsimSession *h,
                                size_t index,
                                uint32_t *id,
                                bool *is_cav);

/**
 * Copies up to `capacity` trace records of vehicle `id` into `buf` and sets
 * `written` to the full trace length. Pass a null `buf` to query the length.
 */
enum PsimStatus psim_trace(const struct PsimSession *h,
                           uint32_t id,
                           struct PsimRecord *buf,
                           size_t capacity,
                           size_t *written);

/**
 * Metrics of CAV `id`.
 */
enum PsimStatus psim_metrics(const struct PsimSession *h, uint32_t id, struct PsimMetrics *out);

/**
 * Writes traces, events, the report and (if `plot`) an SVG chart into `dir`.
 */
enum PsimStatus psim_write_outputs(const struct PsimSession *h, const char *dir, bool plot);

/**
 * Message describing the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *psim_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *psim_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLATOONSIM_H */
