//! C ABI over scenario parsing, validation, and execution.
//!
//! Conventions, mirrored in the generated `include/lqsep.h`:
//!
//! - Every fallible call returns an [`LqsepStatus`]; `Ok` (0) means
//!   success and anything else leaves output handles untouched as NULL.
//! - `char **error_out` parameters may be NULL when the caller does not
//!   want the message; when non-NULL and an error occurs, they receive a
//!   heap string to release with [`lqsep_string_free`].
//! - Handles ([`LqsepScenario`], [`LqsepReport`]) are opaque; release
//!   them with their matching `_free`, which tolerates NULL.
//! - Panics never unwind across the boundary; they come back as
//!   [`LqsepStatus::Panic`].
//!
//! The handles are not synchronized: a scenario or report must not be
//! mutated from one thread while another reads it.

use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lqsep::scenario::{preset_document, run_scenario, Scenario, ScenarioReport, Verdict};
use lqsep::{Error, TimeGrid};

/// Result discipline for every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LqsepStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was rejected (bad preset name, zero steps, ...).
    InvalidArgument = 3,
    /// The scenario document failed validation; the error message lists
    /// every offending key.
    Validation = 4,
    /// Synthesis or simulation failed numerically.
    Numerical = 5,
    /// Reading or writing an artifact failed.
    Io = 6,
    /// An internal panic was caught at the boundary.
    Panic = 7,
}

/// Opaque parsed scenario.
pub struct LqsepScenario {
    inner: Scenario,
}

/// Opaque result of running a scenario.
pub struct LqsepReport {
    inner: ScenarioReport,
}

fn status_for(e: &Error) -> LqsepStatus {
    match e {
        Error::InvalidArgument { .. } | Error::DimensionMismatch { .. } => {
            LqsepStatus::InvalidArgument
        }
        Error::Validation { .. } => LqsepStatus::Validation,
        Error::NumericalBlowup { .. }
        | Error::SynthesisFailure { .. }
        | Error::CausalityViolation { .. } => LqsepStatus::Numerical,
        Error::Io { .. } => LqsepStatus::Io,
    }
}

/// Writes `message` into `error_out` when the caller asked for it.
unsafe fn write_error(error_out: *mut *mut c_char, message: &str) {
    if error_out.is_null() {
        return;
    }
    let owned = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").expect("static is NUL-free"));
    *error_out = owned.into_raw();
}

unsafe fn clear_error(error_out: *mut *mut c_char) {
    if !error_out.is_null() {
        *error_out = std::ptr::null_mut();
    }
}

unsafe fn read_str<'a>(
    ptr: *const c_char,
    error_out: *mut *mut c_char,
    what: &str,
) -> Result<&'a str, LqsepStatus> {
    if ptr.is_null() {
        write_error(error_out, &format!("{what} must not be NULL"));
        return Err(LqsepStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        write_error(error_out, &format!("{what} must be valid UTF-8"));
        LqsepStatus::InvalidUtf8
    })
}

/// Runs `body` with panics fenced off, mapping its error to a status and
/// message.
unsafe fn guarded<T>(
    error_out: *mut *mut c_char,
    body: impl FnOnce() -> Result<T, Error>,
) -> Result<T, LqsepStatus> {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(value)) => Ok(value),
        Ok(Err(e)) => {
            write_error(error_out, &e.to_string());
            Err(status_for(&e))
        }
        Err(_) => {
            write_error(error_out, "internal panic");
            Err(LqsepStatus::Panic)
        }
    }
}

/// Version of the underlying library as a static NUL-terminated string;
/// do not free.
#[no_mangle]
pub extern "C" fn lqsep_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Releases a string produced by this library. NULL is a no-op.
///
/// # Safety
///
/// `s` must be NULL or a pointer previously returned through a
/// `char **` output of this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lqsep_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a scenario document into a new handle.
///
/// On success writes the handle to `out` and returns `Ok`. On failure
/// returns the status and, when `error_out` is non-NULL, a message
/// listing every validation issue.
///
/// # Safety
///
/// `document` must be a NUL-terminated string. `out` must be a valid
/// pointer. `error_out` may be NULL; when non-NULL it must be valid and
/// any string written to it must be released with `lqsep_string_free`.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_parse(
    document: *const c_char,
    out: *mut *mut LqsepScenario,
    error_out: *mut *mut c_char,
) -> LqsepStatus {
    clear_error(error_out);
    if out.is_null() {
        return LqsepStatus::NullPointer;
    }
    *out = std::ptr::null_mut();
    let text = match read_str(document, error_out, "document") {
        Ok(t) => t,
        Err(status) => return status,
    };
    match guarded(error_out, || Scenario::parse(text)) {
        Ok(scenario) => {
            *out = Box::into_raw(Box::new(LqsepScenario { inner: scenario }));
            LqsepStatus::Ok
        }
        Err(status) => status,
    }
}

/// Loads a built-in preset (`lqg_scalar`, `shiryaev_step`) by name.
///
/// # Safety
///
/// Same contracts as `lqsep_scenario_parse`.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_preset(
    name: *const c_char,
    out: *mut *mut LqsepScenario,
    error_out: *mut *mut c_char,
) -> LqsepStatus {
    clear_error(error_out);
    if out.is_null() {
        return LqsepStatus::NullPointer;
    }
    *out = std::ptr::null_mut();
    let name = match read_str(name, error_out, "preset name") {
        Ok(t) => t,
        Err(status) => return status,
    };
    let Some(document) = preset_document(name) else {
        write_error(error_out, &format!("unknown preset `{name}`"));
        return LqsepStatus::InvalidArgument;
    };
    match guarded(error_out, || Scenario::parse(document)) {
        Ok(scenario) => {
            *out = Box::into_raw(Box::new(LqsepScenario { inner: scenario }));
            LqsepStatus::Ok
        }
        Err(status) => status,
    }
}

/// Releases a scenario handle. NULL is a no-op.
///
/// # Safety
///
/// `scenario` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_free(scenario: *mut LqsepScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Writes the canonical document for a scenario to `out` (release with
/// `lqsep_string_free`). Parsing that text reproduces the scenario.
///
/// # Safety
///
/// `scenario` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_document(
    scenario: *const LqsepScenario,
    out: *mut *mut c_char,
) -> LqsepStatus {
    if scenario.is_null() || out.is_null() {
        return LqsepStatus::NullPointer;
    }
    let text = (*scenario).inner.to_document();
    match CString::new(text) {
        Ok(owned) => {
            *out = owned.into_raw();
            LqsepStatus::Ok
        }
        Err(_) => LqsepStatus::Panic,
    }
}

/// Overrides the Monte Carlo path count. Takes effect at the next
/// validate or run, where an unusable value is reported.
///
/// # Safety
///
/// `scenario` must be a live handle with no concurrent readers.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_set_paths(
    scenario: *mut LqsepScenario,
    paths: usize,
) -> LqsepStatus {
    if scenario.is_null() {
        return LqsepStatus::NullPointer;
    }
    (*scenario).inner.paths = paths;
    LqsepStatus::Ok
}

/// Overrides the base seed.
///
/// # Safety
///
/// `scenario` must be a live handle with no concurrent readers.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_set_seed(
    scenario: *mut LqsepScenario,
    seed: u64,
) -> LqsepStatus {
    if scenario.is_null() {
        return LqsepStatus::NullPointer;
    }
    (*scenario).inner.seed = seed;
    LqsepStatus::Ok
}

/// Overrides the number of grid steps, keeping the horizon.
///
/// # Safety
///
/// `scenario` must be a live handle with no concurrent readers.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_set_steps(
    scenario: *mut LqsepScenario,
    steps: usize,
) -> LqsepStatus {
    if scenario.is_null() {
        return LqsepStatus::NullPointer;
    }
    let horizon = (*scenario).inner.grid.horizon();
    match TimeGrid::new(horizon, steps) {
        Ok(grid) => {
            (*scenario).inner.grid = grid;
            LqsepStatus::Ok
        }
        Err(_) => LqsepStatus::InvalidArgument,
    }
}

/// Overrides the output directory for report artifacts.
///
/// # Safety
///
/// `scenario` must be a live handle with no concurrent readers; `dir`
/// must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_set_out_dir(
    scenario: *mut LqsepScenario,
    dir: *const c_char,
) -> LqsepStatus {
    if scenario.is_null() {
        return LqsepStatus::NullPointer;
    }
    let dir = match read_str(dir, std::ptr::null_mut(), "out dir") {
        Ok(d) => d,
        Err(status) => return status,
    };
    (*scenario).inner.out_dir = PathBuf::from(dir);
    LqsepStatus::Ok
}

/// Checks that the scenario is runnable; on failure the error message
/// lists every inconsistency.
///
/// # Safety
///
/// `scenario` must be a live handle; `error_out` as in
/// `lqsep_scenario_parse`.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_validate(
    scenario: *const LqsepScenario,
    error_out: *mut *mut c_char,
) -> LqsepStatus {
    clear_error(error_out);
    if scenario.is_null() {
        return LqsepStatus::NullPointer;
    }
    match guarded(error_out, || (*scenario).inner.validate()) {
        Ok(()) => LqsepStatus::Ok,
        Err(status) => status,
    }
}

/// Runs the scenario's experiments, writes its artifacts, and hands back
/// a report handle.
///
/// # Safety
///
/// `scenario` must be a live handle; `out` must be valid; `error_out` as
/// in `lqsep_scenario_parse`.
#[no_mangle]
pub unsafe extern "C" fn lqsep_scenario_run(
    scenario: *const LqsepScenario,
    out: *mut *mut LqsepReport,
    error_out: *mut *mut c_char,
) -> LqsepStatus {
    clear_error(error_out);
    if out.is_null() {
        return LqsepStatus::NullPointer;
    }
    *out = std::ptr::null_mut();
    if scenario.is_null() {
        return LqsepStatus::NullPointer;
    }
    match guarded(error_out, || run_scenario(&(*scenario).inner)) {
        Ok(report) => {
            *out = Box::into_raw(Box::new(LqsepReport { inner: report }));
            LqsepStatus::Ok
        }
        Err(status) => status,
    }
}

/// Releases a report handle. NULL is a no-op.
///
/// # Safety
///
/// `report` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lqsep_report_free(report: *mut LqsepReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Overall verdict using the CLI exit convention: 0 pass, 1 fail,
/// 3 insufficient statistical power; -1 when `report` is NULL.
///
/// # Safety
///
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lqsep_report_verdict(report: *const LqsepReport) -> c_int {
    if report.is_null() {
        return -1;
    }
    match (*report).inner.overall {
        Verdict::Pass => 0,
        Verdict::Fail => 1,
        Verdict::InsufficientPower => 3,
    }
}

/// Writes the report as JSON (the same bytes `report.json` holds) to
/// `out`; release with `lqsep_string_free`.
///
/// # Safety
///
/// `report` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lqsep_report_json(
    report: *const LqsepReport,
    out: *mut *mut c_char,
) -> LqsepStatus {
    if report.is_null() || out.is_null() {
        return LqsepStatus::NullPointer;
    }
    let json = serde_json::to_string_pretty(&(*report).inner)
        .expect("report serialization has no failing states");
    match CString::new(json) {
        Ok(owned) => {
            *out = owned.into_raw();
            LqsepStatus::Ok
        }
        Err(_) => LqsepStatus::Panic,
    }
}
