//! C ABI over the `deliberate` toolkit.
//!
//! Every fallible function returns a [`DlbStatus`]; on failure the message is available
//! from [`dlb_last_error`] on the same thread. Handles are opaque and must be released
//! with their `_free` function. Strings returned by the library are released with
//! [`dlb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deliberate::data::{N_CATEGORIES, N_THRESHOLDS};
use deliberate::estimation::{estimate, EstimateOptions, EstimationResult};
use deliberate::{load_dataset, Dataset, Error, ModelConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Validation = 4,
    /// The estimate was produced but the optimiser did not converge.
    NotConverged = 5,
    Panic = 6,
}

/// Loaded dataset.
pub struct DlbDataset(Dataset);

/// Estimation result.
pub struct DlbResult(EstimationResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn fail(status: DlbStatus, message: impl Into<String>) -> DlbStatus {
    set_error(message);
    status
}

fn from_error(e: &Error) -> DlbStatus {
    let status = if e.is_io() { DlbStatus::Io } else { DlbStatus::Validation };
    fail(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> DlbStatus) -> DlbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(DlbStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, DlbStatus> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DlbStatus> {
    if p.is_null() {
        return Err(fail(DlbStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DlbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failure on this thread; empty when none. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dlb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dlb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the three input files.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlb_dataset_load(
    ratings: *const c_char,
    individuals: *const c_char,
    schedule: *const c_char,
    out: *mut *mut DlbDataset,
) -> DlbStatus {
    guarded(|| {
        if out.is_null() {
            return fail(DlbStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let paths = (|| Ok((path_arg(ratings, "ratings")?, path_arg(individuals, "individuals")?, path_arg(schedule, "schedule")?)))();
        let (r, i, s) = match paths {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_dataset(&r, &i, &s) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(DlbDataset(d)));
                DlbStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `dataset` must come from [`dlb_dataset_load`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dlb_dataset_free(dataset: *mut DlbDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dlb_dataset_individuals(dataset: *const DlbDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.individuals.len())
}

/// # Safety
/// `dataset` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dlb_dataset_observations(dataset: *const DlbDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.observations.len())
}

/// Estimates the model; `config_toml` may be null for the defaults. On
/// `DLB_STATUS_NOT_CONVERGED` the result is still written to `out`.
///
/// # Safety
/// `dataset` must be a live handle, `config_toml` null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dlb_estimate(
    dataset: *const DlbDataset,
    config_toml: *const c_char,
    out: *mut *mut DlbResult,
) -> DlbStatus {
    guarded(|| {
        if out.is_null() {
            return fail(DlbStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(dataset) = dataset.as_ref() else {
            return fail(DlbStatus::NullPointer, "dataset is null");
        };
        let config = if config_toml.is_null() {
            ModelConfig::default()
        } else {
            let text = match str_arg(config_toml, "config") {
                Ok(t) => t,
                Err(status) => return status,
            };
            match ModelConfig::from_toml(text) {
                Ok(c) => c,
                Err(e) => return from_error(&e),
            }
        };
        match estimate(&dataset.0, &config, &EstimateOptions::default()) {
            Ok(result) => {
                let converged = result.converged;
                *out = Box::into_raw(Box::new(DlbResult(result)));
                if converged {
                    DlbStatus::Ok
                } else {
                    fail(DlbStatus::NotConverged, "optimiser did not converge")
                }
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `result` must come from [`dlb_estimate`] and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dlb_result_free(result: *mut DlbResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// # Safety
/// `result` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dlb_result_parameter_count(result: *const DlbResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.parameters.len())
}

/// Estimate and robust standard error of parameter `index`; the error is NaN for pinned parameters.
///
/// # Safety
/// `result` must be a live handle; `estimate` and `robust_se` writable or null.
#[no_mangle]
pub unsafe extern "C" fn dlb_result_parameter(
    result: *const DlbResult,
    index: usize,
    estimate: *mut f64,
    robust_se: *mut f64,
) -> DlbStatus {
    let Some(r) = result.as_ref() else {
        return fail(DlbStatus::NullPointer, "result is null");
    };
    let Some(p) = r.0.parameters.get(index) else {
        return fail(DlbStatus::InvalidArgument, format!("parameter index {index} out of range"));
    };
    if let Some(e) = estimate.as_mut() {
        *e = p.estimate;
    }
    if let Some(s) = robust_se.as_mut() {
        *s = p.robust_se.unwrap_or(f64::NAN);
    }
    DlbStatus::Ok
}

/// Name of parameter `index` as a new string (free with [`dlb_string_free`]).
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dlb_result_parameter_name(result: *const DlbResult, index: usize, out: *mut *mut c_char) -> DlbStatus {
    if out.is_null() {
        return fail(DlbStatus::NullPointer, "out is null");
    }
    *out = ptr::null_mut();
    let Some(r) = result.as_ref() else {
        return fail(DlbStatus::NullPointer, "result is null");
    };
    let Some(p) = r.0.parameters.get(index) else {
        return fail(DlbStatus::InvalidArgument, format!("parameter index {index} out of range"));
    };
    *out = CString::new(p.name.clone()).unwrap_or_default().into_raw();
    DlbStatus::Ok
}

/// # Safety
/// `result` must be a live handle or null (returns NaN).
#[no_mangle]
pub unsafe extern "C" fn dlb_result_loglik(result: *const DlbResult) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.0.loglik)
}

/// 1 when the optimiser converged, 0 otherwise or for null.
///
/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dlb_result_converged(result: *const DlbResult) -> c_int {
    result.as_ref().map_or(0, |r| c_int::from(r.0.converged))
}

/// Full result as JSON (free with [`dlb_string_free`]).
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dlb_result_to_json(result: *const DlbResult, out: *mut *mut c_char) -> DlbStatus {
    guarded(|| {
        if out.is_null() {
            return fail(DlbStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(r) = result.as_ref() else {
            return fail(DlbStatus::NullPointer, "result is null");
        };
        match r.0.to_json() {
            Ok(text) => {
                *out = CString::new(text).unwrap_or_default().into_raw();
                DlbStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dlb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Share of a workshop effect reverted `delta` days later.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlb_decay(delta: f64, alpha: f64, horizon: f64, out: *mut f64) -> DlbStatus {
    let Some(out) = out.as_mut() else {
        return fail(DlbStatus::NullPointer, "out is null");
    };
    match deliberate::model::decay(delta, alpha, horizon) {
        Ok(d) => {
            *out = d;
            DlbStatus::Ok
        }
        Err(e) => fail(DlbStatus::InvalidArgument, e.to_string()),
    }
}

/// Category probabilities for latent value `v` and ten increasing thresholds.
///
/// # Safety
/// `tau` must point at 10 doubles and `out` at room for 11.
#[no_mangle]
pub unsafe extern "C" fn dlb_ordered_probs(v: f64, tau: *const f64, out: *mut f64) -> DlbStatus {
    if tau.is_null() || out.is_null() {
        return fail(DlbStatus::NullPointer, "tau or out is null");
    }
    let tau = std::slice::from_raw_parts(tau, N_THRESHOLDS);
    match deliberate::model::ordered_probs(v, tau) {
        Ok(p) => {
            std::slice::from_raw_parts_mut(out, N_CATEGORIES).copy_from_slice(&p);
            DlbStatus::Ok
        }
        Err(e) => fail(DlbStatus::InvalidArgument, e.to_string()),
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlb_inverse_normal_cdf(u: f64, out: *mut f64) -> DlbStatus {
    let Some(out) = out.as_mut() else {
        return fail(DlbStatus::NullPointer, "out is null");
    };
    match deliberate::draws::inverse_normal_cdf(u) {
        Ok(z) => {
            *out = z;
            DlbStatus::Ok
        }
        Err(e) => fail(DlbStatus::InvalidArgument, e.to_string()),
    }
}

/// Two-sided paired t-test on `n` differences.
///
/// # Safety
/// `differences` must point at `n` doubles; `t` and `p` writable or null.
#[no_mangle]
pub unsafe extern "C" fn dlb_paired_t_test(differences: *const f64, n: usize, t: *mut f64, p: *mut f64) -> DlbStatus {
    if differences.is_null() {
        return fail(DlbStatus::NullPointer, "differences is null");
    }
    let d = std::slice::from_raw_parts(differences, n);
    match deliberate::reporting::paired_t_test(d) {
        Ok(r) => {
            if let Some(t) = t.as_mut() {
                *t = r.t;
            }
            if let Some(p) = p.as_mut() {
                *p = r.p;
            }
            DlbStatus::Ok
        }
        Err(e) => fail(DlbStatus::InvalidArgument, e.to_string()),
    }
}
