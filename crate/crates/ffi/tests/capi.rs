use std::ffi::{CStr, CString};
use std::ptr;

use vecof_ffi::*;

const FIXTURE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../core/fixtures/coop_driving.scn"
);

fn load() -> *mut VecofScenario {
    let path = CString::new(FIXTURE).unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(
        unsafe { vecof_scenario_load(path.as_ptr(), &mut sc) },
        VecofStatus::Ok
    );
    assert!(!sc.is_null());
    sc
}

fn run(sc: *const VecofScenario, seed: u64, keep: bool) -> *mut VecofReport {
    let mut r = ptr::null_mut();
    assert_eq!(
        unsafe { vecof_scenario_run(sc, seed, keep, &mut r) },
        VecofStatus::Ok
    );
    r
}

fn last_error() -> String {
    let p = vecof_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn run_fixture_through_c_abi() {
    let sc = load();
    let r = run(sc, 7, true);
    let mut passed = false;
    let mut hash = 0u64;
    unsafe {
        assert_eq!(vecof_report_passed(r, &mut passed), VecofStatus::Ok);
        assert_eq!(vecof_report_trace_hash(r, &mut hash), VecofStatus::Ok);
    }
    assert!(passed);

    let trace = unsafe { vecof_report_render_trace(r) };
    let text = unsafe { CStr::from_ptr(trace) }
        .to_str()
        .unwrap()
        .to_owned();
    unsafe { vecof_string_free(trace) };
    assert_eq!(vecof::scenario::hash_trace_text(&text), hash);
    assert!(text.ends_with(&format!("END hash={hash:016x}\n")));

    let again = run(sc, 7, false);
    let mut hash2 = 0u64;
    unsafe {
        vecof_report_trace_hash(again, &mut hash2);
        vecof_report_free(again);
        vecof_report_free(r);
        vecof_scenario_free(sc);
    }
    assert_eq!(hash, hash2);
}

#[test]
fn metric_lookup() {
    let sc = load();
    let r = run(sc, 0, false);
    let key = CString::new("sub.sem1.received").unwrap();
    let mut v = 0.0;
    assert_eq!(
        unsafe { vecof_report_metric(r, key.as_ptr(), &mut v) },
        VecofStatus::Ok
    );
    assert_eq!(v, 2.0);

    let missing = CString::new("no.such.metric").unwrap();
    assert_eq!(
        unsafe { vecof_report_metric(r, missing.as_ptr(), &mut v) },
        VecofStatus::NotFound
    );
    assert!(last_error().contains("no.such.metric"));

    let text = CString::new("modules.keyspace").unwrap();
    let status = unsafe { vecof_report_metric(r, text.as_ptr(), &mut v) };
    assert!(matches!(status, VecofStatus::Ok | VecofStatus::NotNumeric));

    let metrics = unsafe { vecof_report_render_metrics(r) };
    let block = unsafe { CStr::from_ptr(metrics) }.to_str().unwrap();
    assert!(block.starts_with("METRICS\n"));
    unsafe {
        vecof_string_free(metrics);
        vecof_report_free(r);
        vecof_scenario_free(sc);
    }
}

#[test]
fn error_codes() {
    let mut sc = ptr::null_mut();
    let bad = CString::new("scenario x\nnode a BOGUS\n").unwrap();
    assert_eq!(
        unsafe { vecof_scenario_parse(bad.as_ptr(), &mut sc) },
        VecofStatus::Parse
    );
    assert!(sc.is_null());
    assert!(last_error().starts_with("line 2"));

    let nowhere = CString::new("/nonexistent/x.scn").unwrap();
    assert_eq!(
        unsafe { vecof_scenario_load(nowhere.as_ptr(), &mut sc) },
        VecofStatus::Io
    );

    assert_eq!(
        unsafe { vecof_scenario_parse(ptr::null(), &mut sc) },
        VecofStatus::NullArgument
    );
    let utf = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { vecof_scenario_parse(utf.as_ptr().cast(), &mut sc) },
        VecofStatus::InvalidUtf8
    );
    let mut r = ptr::null_mut();
    assert_eq!(
        unsafe { vecof_scenario_run(ptr::null(), 0, false, &mut r) },
        VecofStatus::NullArgument
    );
    assert!(unsafe { vecof_report_render_metrics(ptr::null()) }.is_null());
    unsafe {
        vecof_scenario_free(ptr::null_mut());
        vecof_report_free(ptr::null_mut());
        vecof_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vecof.h")).unwrap();
    for f in [
        "vecof_scenario_parse",
        "vecof_scenario_load",
        "vecof_scenario_run",
        "vecof_scenario_free",
        "vecof_report_passed",
        "vecof_report_trace_hash",
        "vecof_report_metric",
        "vecof_report_render_metrics",
        "vecof_report_render_trace",
        "vecof_report_free",
        "vecof_string_free",
        "vecof_last_error",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct VecofScenario VecofScenario;"));
    assert!(header.contains("VECOF_STATUS_PARSE = 3"));
}
