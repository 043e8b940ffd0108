//! C interface to the tfrproj engine.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns
//! a [`TfrStatus`]; on failure, [`tfr_last_error`] describes the most recent
//! error on the calling thread.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use tfrproj::data::{classify, Mode, PoolCriterion};
use tfrproj::mcmc::McmcSettings;
use tfrproj::{DataStore, Error, FitConfig, FitResult, ProjectionConfig, ProjectionResult};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TfrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad data, configuration or arguments.
    InputError = 3,
    /// The computation failed.
    ComputeError = 4,
    /// The fit did not pass the convergence check.
    ConvergenceGate = 5,
    NotFound = 6,
    Panic = 7,
}

pub struct TfrStore(DataStore);
pub struct TfrFit(FitResult);
pub struct TfrProjection(ProjectionResult);

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TfrFitOptions {
    /// Restrict the pool to countries at or below `low_threshold` in the
    /// period starting at `low_reference_period`.
    pub low_pool: bool,
    pub low_threshold: f64,
    pub low_reference_period: i32,
    pub phase3_threshold: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TfrProjectOptions {
    pub horizon_end_year: i32,
    pub trajectories: usize,
    pub seed: u64,
    /// Project even if the convergence check fails.
    pub force: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: TfrStatus, message: impl Into<String>) -> TfrStatus {
    set_error(message.into());
    status
}

fn from_error(e: Error) -> TfrStatus {
    let status = match &e {
        Error::ConvergenceGate(_) => TfrStatus::ConvergenceGate,
        Error::UnknownCountry(_) => TfrStatus::NotFound,
        Error::InvalidParameter(_) => TfrStatus::InputError,
        e if e.is_input_error() => TfrStatus::InputError,
        _ => TfrStatus::ComputeError,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> TfrStatus) -> TfrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TfrStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, TfrStatus> {
    if p.is_null() {
        return Err(fail(TfrStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TfrStatus::InvalidUtf8, "string argument is not UTF-8"))
}

macro_rules! non_null {
    ($($p:expr),+) => {
        $(if $p.is_null() {
            return fail(TfrStatus::NullPointer, concat!("null argument: ", stringify!($p)));
        })+
    };
}

/// Message for the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tfr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Expected decrement of the double-logistic curve at level `f`.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_double_logistic(
    f: f64,
    delta1: f64,
    delta2: f64,
    delta3: f64,
    delta4: f64,
    d: f64,
    out: *mut f64,
) -> TfrStatus {
    non_null!(out);
    match tfrproj::Phase2Params::new(delta1, delta2, delta3, delta4, d) {
        Ok(p) => {
            *out = tfrproj::double_logistic_decrement(f, &p);
            TfrStatus::Ok
        }
        Err(e) => from_error(e),
    }
}

/// Parses CSV text with header `country_id,country_name,year,tfr`.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_store_parse_csv(
    text: *const c_char,
    annual: bool,
    out: *mut *mut TfrStore,
) -> TfrStatus {
    non_null!(out);
    guard(|| {
        let text = match str_arg(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let mode = if annual { Mode::Annual } else { Mode::FiveYear };
        match tfrproj::parse_tfr_csv(text, mode) {
            Ok(store) => {
                *out = Box::into_raw(Box::new(TfrStore(store)));
                TfrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_store_free(store: *mut TfrStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of countries; 0 for NULL.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_store_len(store: *const TfrStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// Phase boundaries of one country as observation indices. `phase3_start`
/// is -1 when the country has not entered Phase III.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_store_classify(
    store: *const TfrStore,
    country_id: *const c_char,
    threshold: f64,
    phase2_start: *mut usize,
    phase3_start: *mut i64,
) -> TfrStatus {
    non_null!(store, phase2_start, phase3_start);
    guard(|| {
        let id = match str_arg(country_id) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let Some(series) = (*store).0.get(id) else {
            return fail(TfrStatus::NotFound, format!("unknown country {id}"));
        };
        match classify(series, threshold) {
            Ok(seg) => {
                *phase2_start = seg.phase2_start;
                *phase3_start = seg.phase3_start.map_or(-1, |p| p as i64);
                TfrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Options matching the command-line defaults.
#[no_mangle]
pub extern "C" fn tfr_fit_options_default() -> TfrFitOptions {
    let m = McmcSettings::default();
    TfrFitOptions {
        low_pool: false,
        low_threshold: tfrproj::data::DEFAULT_LOW_THRESHOLD,
        low_reference_period: 2015,
        phase3_threshold: tfrproj::data::DEFAULT_PHASE3_THRESHOLD,
        iterations: m.iterations,
        burn_in: m.burn_in,
        thin: m.thin,
        chains: m.chains,
        seed: m.seed,
    }
}

/// Samples both phases for the selected pool.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_fit(
    store: *const TfrStore,
    options: *const TfrFitOptions,
    out: *mut *mut TfrFit,
) -> TfrStatus {
    non_null!(store, options, out);
    guard(|| {
        let o = *options;
        let store = &(*store).0;
        let pool = if o.low_pool {
            PoolCriterion::LowFertility {
                threshold: o.low_threshold,
                reference_period: o.low_reference_period,
            }
        } else {
            PoolCriterion::All
        };
        let mut config = FitConfig::new(store.mode(), pool);
        config.phase3_threshold = o.phase3_threshold;
        config.mcmc = McmcSettings {
            iterations: o.iterations,
            burn_in: o.burn_in,
            thin: o.thin,
            chains: o.chains,
            seed: o.seed,
            ..McmcSettings::default()
        };
        if let Err(e) = config.mcmc.validate() {
            return from_error(e);
        }
        match tfrproj::fit(store, &config) {
            Ok(f) => {
                *out = Box::into_raw(Box::new(TfrFit(f)));
                TfrStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_fit_free(fit: *mut TfrFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Number of pooled countries; 0 for NULL.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_fit_pool_size(fit: *const TfrFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.pool.len())
}

/// Largest potential scale reduction factor over the pool-level coordinates.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_fit_max_rhat(fit: *const TfrFit, out: *mut f64) -> TfrStatus {
    non_null!(fit, out);
    guard(|| match tfrproj::projection::convergence_report(&(*fit).0) {
        Ok(report) => {
            *out = report
                .iter()
                .filter_map(|(_, r)| match r {
                    tfrproj::mcmc::Rhat::Value(v) => Some(*v),
                    tfrproj::mcmc::Rhat::NotApplicable => None,
                })
                .fold(1.0, f64::max);
            TfrStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

#[no_mangle]
pub extern "C" fn tfr_project_options_default() -> TfrProjectOptions {
    let p = ProjectionConfig::default();
    TfrProjectOptions {
        horizon_end_year: p.horizon_end_year,
        trajectories: p.trajectories,
        seed: p.seed,
        force: p.force,
    }
}

/// Projects one pooled country.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_project(
    store: *const TfrStore,
    fit: *const TfrFit,
    country_id: *const c_char,
    options: *const TfrProjectOptions,
    out: *mut *mut TfrProjection,
) -> TfrStatus {
    non_null!(store, fit, options, out);
    guard(|| {
        let id = match str_arg(country_id) {
            Ok(t) => t.to_owned(),
            Err(s) => return s,
        };
        let o = *options;
        let config = ProjectionConfig {
            horizon_end_year: o.horizon_end_year,
            trajectories: o.trajectories,
            seed: o.seed,
            force: o.force,
            ..ProjectionConfig::default()
        };
        let fit = &(*fit).0;
        if !fit.pool.contains(&id) {
            return fail(TfrStatus::NotFound, format!("{id} is not in the fitted pool"));
        }
        let result: Result<BTreeMap<String, ProjectionResult>, Error> =
            tfrproj::project(&(*store).0, fit, &config, Some(std::slice::from_ref(&id)));
        match result.map(|mut m| m.remove(&id)) {
            Ok(Some(p)) => {
                *out = Box::into_raw(Box::new(TfrProjection(p)));
                TfrStatus::Ok
            }
            Ok(None) => fail(TfrStatus::NotFound, format!("no projection for {id}")),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_projection_free(p: *mut TfrProjection) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of projected periods; 0 for NULL.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_projection_periods(p: *const TfrProjection) -> usize {
    p.as_ref().map_or(0, |p| p.0.period_starts.len())
}

/// First year of projected period `index`.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_projection_period_start(
    p: *const TfrProjection,
    index: usize,
    out: *mut i32,
) -> TfrStatus {
    non_null!(p, out);
    let p = &(*p).0;
    match p.period_starts.get(index) {
        Some(&y) => {
            *out = y;
            TfrStatus::Ok
        }
        None => fail(TfrStatus::NotFound, format!("period index {index} out of range")),
    }
}

/// Quantile at `level` (one of 0.025, 0.1, 0.5, 0.9, 0.975) for period
/// `index`.
///
/// # Safety
/// Pointer arguments must be NULL or point to live objects of the stated
/// type; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfr_projection_quantile(
    p: *const TfrProjection,
    level: f64,
    index: usize,
    out: *mut f64,
) -> TfrStatus {
    non_null!(p, out);
    let p = &(*p).0;
    match p.level(level).and_then(|v| v.get(index).copied()) {
        Some(x) => {
            *out = x;
            TfrStatus::Ok
        }
        None => fail(
            TfrStatus::NotFound,
            format!("no quantile {level} at period index {index}"),
        ),
    }
}
