//! Exercises the C entry points the way a foreign caller would: through
//! raw pointers, checking statuses, output handles, and string ownership.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use lqsep_ffi::*;
use tempfile::tempdir;

fn doc_with_out(out: &str) -> CString {
    CString::new(format!(
        "\
name = ffi_tiny
grid.horizon = 1
grid.steps = 200
model.state_dim = 1
model.control_dim = 1
model.obs_dim = 1
model.noise_dim = 2
model.a = constant [0]
model.b1 = constant [1]
model.b2 = constant [1, 0]
model.c = constant [1]
model.d = constant [0, 1]
model.initial = deterministic [1]
cost.q = constant [1]
cost.r = constant [1]
cost.s = [0]
noise = wiener 2
law = separated
experiments = cancellation, causality
paths = 4
seed = 11
out = {out}
"
    ))
    .unwrap()
}

unsafe fn take_string(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null());
    let s = CStr::from_ptr(ptr).to_str().unwrap().to_string();
    lqsep_string_free(ptr);
    s
}

#[test]
fn parse_validate_run_and_read_back() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("ffi_out");
    let doc = doc_with_out(out_dir.to_str().unwrap());

    unsafe {
        let mut scenario: *mut LqsepScenario = ptr::null_mut();
        let mut error: *mut c_char = ptr::null_mut();
        let status = lqsep_scenario_parse(doc.as_ptr(), &mut scenario, &mut error);
        assert_eq!(status, LqsepStatus::Ok);
        assert!(error.is_null());
        assert!(!scenario.is_null());

        assert_eq!(lqsep_scenario_validate(scenario, &mut error), LqsepStatus::Ok);

        // The canonical document round-trips through a second handle.
        let mut text: *mut c_char = ptr::null_mut();
        assert_eq!(lqsep_scenario_document(scenario, &mut text), LqsepStatus::Ok);
        let canonical = take_string(text);
        let canonical_c = CString::new(canonical).unwrap();
        let mut twin: *mut LqsepScenario = ptr::null_mut();
        assert_eq!(
            lqsep_scenario_parse(canonical_c.as_ptr(), &mut twin, &mut error),
            LqsepStatus::Ok
        );
        lqsep_scenario_free(twin);

        let mut report: *mut LqsepReport = ptr::null_mut();
        let status = lqsep_scenario_run(scenario, &mut report, &mut error);
        if !error.is_null() {
            panic!("run failed: {}", take_string(error));
        }
        assert_eq!(status, LqsepStatus::Ok);
        assert_eq!(lqsep_report_verdict(report), 0);

        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(lqsep_report_json(report, &mut json), LqsepStatus::Ok);
        let json = take_string(json);
        assert!(json.contains("\"cancellation\""), "json: {json}");
        // The handle's JSON matches the artifact on disk.
        let on_disk = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
        assert_eq!(on_disk.trim_end(), json);

        lqsep_report_free(report);
        lqsep_scenario_free(scenario);
    }
}

#[test]
fn overrides_feed_back_into_the_run() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("preset_out");
    unsafe {
        let name = CString::new("lqg_scalar").unwrap();
        let mut scenario: *mut LqsepScenario = ptr::null_mut();
        let mut error: *mut c_char = ptr::null_mut();
        assert_eq!(
            lqsep_scenario_preset(name.as_ptr(), &mut scenario, &mut error),
            LqsepStatus::Ok
        );

        // Shrink the preset so the run stays fast; 2 paths trips the
        // power floor, which must surface as verdict 3, not a failure.
        assert_eq!(lqsep_scenario_set_steps(scenario, 200), LqsepStatus::Ok);
        assert_eq!(lqsep_scenario_set_paths(scenario, 2), LqsepStatus::Ok);
        assert_eq!(lqsep_scenario_set_seed(scenario, 42), LqsepStatus::Ok);
        let dir_c = CString::new(out_dir.to_str().unwrap()).unwrap();
        assert_eq!(
            lqsep_scenario_set_out_dir(scenario, dir_c.as_ptr()),
            LqsepStatus::Ok
        );

        let mut report: *mut LqsepReport = ptr::null_mut();
        let status = lqsep_scenario_run(scenario, &mut report, &mut error);
        if !error.is_null() {
            panic!("run failed: {}", take_string(error));
        }
        assert_eq!(status, LqsepStatus::Ok);
        assert_eq!(lqsep_report_verdict(report), 3);

        lqsep_report_free(report);
        lqsep_scenario_free(scenario);
    }
}

#[test]
fn error_paths_return_statuses_and_messages() {
    unsafe {
        let mut scenario: *mut LqsepScenario = ptr::null_mut();
        let mut error: *mut c_char = ptr::null_mut();

        // NULL document.
        assert_eq!(
            lqsep_scenario_parse(ptr::null(), &mut scenario, &mut error),
            LqsepStatus::NullPointer
        );
        assert!(scenario.is_null());
        let _ = take_string(error);
        error = ptr::null_mut();

        // Validation failure lists the offending keys.
        let bad = CString::new("name = x\nlaw = separated\ncost.q = constant [-1]").unwrap();
        assert_eq!(
            lqsep_scenario_parse(bad.as_ptr(), &mut scenario, &mut error),
            LqsepStatus::Validation
        );
        assert!(scenario.is_null());
        let message = take_string(error);
        assert!(message.contains("model.a"), "message: {message}");
        error = ptr::null_mut();

        // Unknown preset.
        let name = CString::new("warp_drive").unwrap();
        assert_eq!(
            lqsep_scenario_preset(name.as_ptr(), &mut scenario, &mut error),
            LqsepStatus::InvalidArgument
        );
        let message = take_string(error);
        assert!(message.contains("warp_drive"), "message: {message}");

        // NULL-tolerant accessors.
        assert_eq!(lqsep_report_verdict(ptr::null()), -1);
        lqsep_scenario_free(ptr::null_mut());
        lqsep_report_free(ptr::null_mut());
        lqsep_string_free(ptr::null_mut());

        // Version string is static and readable.
        let version = CStr::from_ptr(lqsep_version()).to_str().unwrap();
        assert!(!version.is_empty());
    }
}
