/* C interface to the lqsep control and filtering library. */

#ifndef LQSEP_H
#define LQSEP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result discipline for every fallible entry point.
typedef enum LqsepStatus {
  // Success.
  LQSEP_STATUS_OK = 0,
  // A required pointer argument was NULL.
  LQSEP_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  LQSEP_STATUS_INVALID_UTF8 = 2,
  // An argument was rejected (bad preset name, zero steps, ...).
  LQSEP_STATUS_INVALID_ARGUMENT = 3,
  // The scenario document failed validation; the error message lists
  // every offending key.
  LQSEP_STATUS_VALIDATION = 4,
  // Synthesis or simulation failed numerically.
  LQSEP_STATUS_NUMERICAL = 5,
  // Reading or writing an artifact failed.
  LQSEP_STATUS_IO = 6,
  // An internal panic was caught at the boundary.
  LQSEP_STATUS_PANIC = 7,
} LqsepStatus;

// Opaque result of running a scenario.
typedef struct LqsepReport LqsepReport;

// Opaque parsed scenario.
typedef struct LqsepScenario LqsepScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version of the underlying library as a static NUL-terminated string;
// do not free.
const char *lqsep_version(void);

// Releases a string produced by this library. NULL is a no-op.
//
// # Safety
//
// `s` must be NULL or a pointer previously returned through a
// `char **` output of this library, not yet freed.
void lqsep_string_free(char *s);

// Parses a scenario document into a new handle.
//
// On success writes the handle to `out` and returns `Ok`. On failure
// returns the status and, when `error_out` is non-NULL, a message
// listing every validation issue.
//
// # Safety
//
// `document` must be a NUL-terminated string. `out` must be a valid
// pointer. `error_out` may be NULL; when non-NULL it must be valid and
// any string written to it must be released with `lqsep_string_free`.
enum LqsepStatus lqsep_scenario_parse(const char *document,
                                      struct LqsepScenario **out,
                                      char **error_out);

// Loads a built-in preset (`lqg_scalar`, `shiryaev_step`) by name.
//
// # Safety
//
// Same contracts as `lqsep_scenario_parse`.
enum LqsepStatus lqsep_scenario_preset(const char *name,
                                       struct LqsepScenario **out,
                                       char **error_out);

// Releases a scenario handle. NULL is a no-op.
//
// # Safety
//
// `scenario` must be NULL or a handle from this library, not yet freed.
void lqsep_scenario_free(struct LqsepScenario *scenario);

// Writes the canonical document for a scenario to `out` (release with
// `lqsep_string_free`). Parsing that text reproduces the scenario.
//
// # Safety
//
// `scenario` must be a live handle; `out` must be valid.
enum LqsepStatus lqsep_scenario_document(const struct LqsepScenario *scenario, char **out);

// Overrides the Monte Carlo path count. Takes effect at the next
// validate or run, where an unusable value is reported.
//
// # Safety
//
// `scenario` must be a live handle with no concurrent readers.
enum LqsepStatus lqsep_scenario_set_paths(struct LqsepScenario *scenario, size_t paths);

// Overrides the base seed.
//
// # Safety
//
// `scenario` must be a live handle with no concurrent readers.
enum LqsepStatus lqsep_scenario_set_seed(struct LqsepScenario *scenario, uint64_t seed);

// Overrides the number of grid steps, keeping the horizon.
//
// # Safety
//
// `scenario` must be a live handle with no concurrent readers.
enum LqsepStatus lqsep_scenario_set_steps(struct LqsepScenario *scenario, size_t steps);

// Overrides the output directory for report artifacts.
//
// # Safety
//
// `scenario` must be a live handle with no concurrent readers; `dir`
// must be a NUL-terminated string.
enum LqsepStatus lqsep_scenario_set_out_dir(struct LqsepScenario *scenario, const char *dir);

// Checks that the scenario is runnable; on failure the error message
// lists every inconsistency.
//
// # Safety
//
// `scenario` must be a live handle; `error_out` as in
// `lqsep_scenario_parse`.
enum LqsepStatus lqsep_scenario_validate(const struct LqsepScenario *scenario, char **error_out);

// Runs the scenario's experiments, writes its artifacts, and hands back
// a report handle.
//
// # Safety
//
// `scenario` must be a live handle; `out` must be valid; `error_out` as
// in `lqsep_scenario_parse`.
enum LqsepStatus lqsep_scenario_run(const struct LqsepScenario *scenario,
                                    struct LqsepReport **out,
                                    char **error_out);

// Releases a report handle. NULL is a no-op.
//
// # Safety
//
// `report` must be NULL or a handle from this library, not yet freed.
void lqsep_report_free(struct LqsepReport *report);

// Overall verdict using the CLI exit convention: 0 pass, 1 fail,
// 3 insufficient statistical power; -1 when `report` is NULL.
//
// # Safety
//
// `report` must be NULL or a live handle.
int lqsep_report_verdict(const struct LqsepReport *report);

// Writes the report as JSON (the same bytes `report.json` holds) to
// `out`; release with `lqsep_string_free`.
//
// # Safety
//
// `report` must be a live handle; `out` must be valid.
enum LqsepStatus lqsep_report_json(const struct LqsepReport *report, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LQSEP_H */
