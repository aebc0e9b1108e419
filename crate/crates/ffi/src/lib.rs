//! C ABI over the scenario runner.
//!
//! Scenarios and reports are opaque handles owned by the caller and released
//! with the matching `_free` function. Every fallible call returns a
//! [`VecofStatus`]; the message for the most recent failure on the calling
//! thread is available from [`vecof_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vecof::scenario::{
    load_scenario, parse_scenario, run_scenario, Metric, RunOptions, RunReport, Scenario,
    ScenarioError,
};

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecofStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Io = 4,
    Runtime = 5,
    NotFound = 6,
    NotNumeric = 7,
    Panic = 8,
}

/// Parsed scenario.
pub struct VecofScenario(Scenario);

/// Outcome of one scenario run.
pub struct VecofReport(RunReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: VecofStatus, msg: impl Into<String>) -> VecofStatus {
    set_error(msg);
    status
}

fn scenario_status(e: &ScenarioError) -> VecofStatus {
    let status = match e {
        ScenarioError::Io(_) => VecofStatus::Io,
        e if e.is_parse() => VecofStatus::Parse,
        _ => VecofStatus::Runtime,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> VecofStatus) -> VecofStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(VecofStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, VecofStatus> {
    if p.is_null() {
        return Err(fail(VecofStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(VecofStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

fn store_scenario(
    sc: Result<Scenario, ScenarioError>,
    out: *mut *mut VecofScenario,
) -> VecofStatus {
    match sc {
        Ok(sc) => {
            unsafe { *out = Box::into_raw(Box::new(VecofScenario(sc))) };
            VecofStatus::Ok
        }
        Err(e) => scenario_status(&e),
    }
}

/// Parses scenario text into a new handle stored in `*out`.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vecof_scenario_parse(
    text: *const c_char,
    out: *mut *mut VecofScenario,
) -> VecofStatus {
    guard(|| {
        if out.is_null() {
            return fail(VecofStatus::NullArgument, "out is null");
        }
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        store_scenario(parse_scenario(text), out)
    })
}

/// Reads and parses a scenario file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vecof_scenario_load(
    path: *const c_char,
    out: *mut *mut VecofScenario,
) -> VecofStatus {
    guard(|| {
        if out.is_null() {
            return fail(VecofStatus::NullArgument, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        store_scenario(load_scenario(Path::new(path)), out)
    })
}

/// Runs `scenario` with `seed`. When `keep_lines` is set the report can
/// render the full trace, otherwise only its hash is kept.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vecof_scenario_run(
    scenario: *const VecofScenario,
    seed: u64,
    keep_lines: bool,
    out: *mut *mut VecofReport,
) -> VecofStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            return fail(VecofStatus::NullArgument, "scenario or out is null");
        }
        let opts = RunOptions { seed, keep_lines };
        match run_scenario(&(*scenario).0, opts) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(VecofReport(r)));
                VecofStatus::Ok
            }
            Err(e) => scenario_status(&e),
        }
    })
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vecof_scenario_free(scenario: *mut VecofScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vecof_report_passed(
    report: *const VecofReport,
    out: *mut bool,
) -> VecofStatus {
    if report.is_null() || out.is_null() {
        return fail(VecofStatus::NullArgument, "report or out is null");
    }
    *out = (*report).0.passed();
    VecofStatus::Ok
}

/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vecof_report_trace_hash(
    report: *const VecofReport,
    out: *mut u64,
) -> VecofStatus {
    if report.is_null() || out.is_null() {
        return fail(VecofStatus::NullArgument, "report or out is null");
    }
    *out = (*report).0.trace_hash;
    VecofStatus::Ok
}

/// Looks up a numeric metric by name.
///
/// # Safety
/// `report` must be a live handle, `key` a NUL-terminated string and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vecof_report_metric(
    report: *const VecofReport,
    key: *const c_char,
    out: *mut f64,
) -> VecofStatus {
    if report.is_null() || out.is_null() {
        return fail(VecofStatus::NullArgument, "report or out is null");
    }
    let key = match str_arg(key, "key") {
        Ok(k) => k,
        Err(s) => return s,
    };
    match (*report).0.metric(key) {
        Some(Metric::Num(x)) => {
            *out = *x;
            VecofStatus::Ok
        }
        Some(Metric::Text(t)) => fail(VecofStatus::NotNumeric, format!("{key} = {t}")),
        None => fail(VecofStatus::NotFound, format!("no metric {key}")),
    }
}

/// Metrics block as text. Free with [`vecof_string_free`].
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vecof_report_render_metrics(report: *const VecofReport) -> *mut c_char {
    if report.is_null() {
        set_error("report is null");
        return ptr::null_mut();
    }
    into_c_string((*report).0.render_metrics())
}

/// Full trace file contents. Free with [`vecof_string_free`].
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vecof_report_render_trace(report: *const VecofReport) -> *mut c_char {
    if report.is_null() {
        set_error("report is null");
        return ptr::null_mut();
    }
    into_c_string((*report).0.render_trace())
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vecof_report_free(report: *mut VecofReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vecof_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vecof_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
