#ifndef VECOF_H
#define VECOF_H

#pragma once

#include <stdbool.h>
#include <stdint.h>

// Result codes shared by every fallible entry point.
typedef enum VecofStatus {
  VECOF_STATUS_OK = 0,
  VECOF_STATUS_NULL_ARGUMENT = 1,
  VECOF_STATUS_INVALID_UTF8 = 2,
  VECOF_STATUS_PARSE = 3,
  VECOF_STATUS_IO = 4,
  VECOF_STATUS_RUNTIME = 5,
  VECOF_STATUS_NOT_FOUND = 6,
  VECOF_STATUS_NOT_NUMERIC = 7,
  VECOF_STATUS_PANIC = 8,
} VecofStatus;

// Outcome of one scenario run.
typedef struct VecofReport VecofReport;

// Parsed scenario.
typedef struct VecofScenario VecofScenario;

// Parses scenario text into a new handle stored in `*out`.
//
// # Safety
// `text` must be a valid NUL-terminated string and `out` a valid pointer.
enum VecofStatus vecof_scenario_parse(const char *text, struct VecofScenario **out);

// Reads and parses a scenario file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum VecofStatus vecof_scenario_load(const char *path, struct VecofScenario **out);

// Runs `scenario` with `seed`. When `keep_lines` is set the report can
// render the full trace, otherwise only its hash is kept.
//
// # Safety
// `scenario` must be a live handle and `out` a valid pointer.
enum VecofStatus vecof_scenario_run(const struct VecofScenario *scenario,
                                    uint64_t seed,
                                    bool keep_lines,
                                    struct VecofReport **out);

// # Safety
// `scenario` must be null or a handle not yet freed.
void vecof_scenario_free(struct VecofScenario *scenario);

// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum VecofStatus vecof_report_passed(const struct VecofReport *report, bool *out);

// # Safety
// `report` must be a live handle and `out` a valid pointer.
enum VecofStatus vecof_report_trace_hash(const struct VecofReport *report, uint64_t *out);

// Looks up a numeric metric by name.
//
// # Safety
// `report` must be a live handle, `key` a NUL-terminated string and `out`
// a valid pointer.
enum VecofStatus vecof_report_metric(const struct VecofReport *report,
                                     const char *key,
                                     double *out);

// Metrics block as text. Free with [`vecof_string_free`].
//
// # Safety
// `report` must be null or a live handle.
char *vecof_report_render_metrics(const struct VecofReport *report);

// Full trace file contents. Free with [`vecof_string_free`].
//
// # Safety
// `report` must be null or a live handle.
char *vecof_report_render_trace(const struct VecofReport *report);

// # Safety
// `report` must be null or a handle not yet freed.
void vecof_report_free(struct VecofReport *report);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void vecof_string_free(char *s);

// Message for the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *vecof_last_error(void);

#endif  /* VECOF_H */
