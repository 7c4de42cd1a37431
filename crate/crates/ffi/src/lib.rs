//! C interface to the jlbo simulator.
//!
//! Every function returns a [`JlboStatus`]. Objects cross the boundary as
//! opaque handles that the caller releases with the matching `_free`
//! function. The message of the last failure on the calling thread is
//! available from [`jlbo_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use jlbo::driver::BeamPolicy;
use jlbo::harness::{emit, nmse, run_monte_carlo, MonteCarloOutput, OutputFormat, Profile, SweepAxis, SystemConfig};
use jlbo::JlboError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JlboStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    AssumptionRefused = 4,
    Numerical = 5,
    Io = 6,
    OutOfRange = 7,
    Panic = 8,
}

/// Run configuration.
pub struct JlboConfig {
    inner: SystemConfig,
}

/// Records of one finished sweep.
pub struct JlboResults {
    output: MonteCarloOutput,
    config: SystemConfig,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JlboAlgorithm {
    Jlbo = 0,
    Random = 1,
    FixedRis = 2,
}

/// One row of the per-iteration trace. Failed runs have iteration 0 and NaN
/// metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JlboRecord {
    pub trial: u64,
    pub seed: u64,
    pub sweep_value: f64,
    pub iteration: u64,
    pub algorithm: JlboAlgorithm,
    pub nmse_position: f64,
    pub nmse_kappa: f64,
    pub crlb_total: f64,
    pub residual: f64,
    pub wall_ms: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &JlboError) -> JlboStatus {
    match e.root() {
        JlboError::InvalidConfig(_) | JlboError::Parse(_) | JlboError::Dimension(_) => JlboStatus::InvalidConfig,
        JlboError::AssumptionRefused(_) => JlboStatus::AssumptionRefused,
        JlboError::Io(_) => JlboStatus::Io,
        _ => JlboStatus::Numerical,
    }
}

fn fail(status: JlboStatus, msg: impl Into<String>) -> JlboStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> JlboStatus) -> JlboStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(JlboStatus::Panic, msg)
        }
    }
}

fn lift(r: jlbo::Result<()>) -> JlboStatus {
    match r {
        Ok(()) => JlboStatus::Ok,
        Err(e) => fail(status_of(&e), e.to_string()),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, JlboStatus> {
    if p.is_null() {
        return Err(fail(JlboStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(JlboStatus::InvalidArgument, "string is not UTF-8"))
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn jlbo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn jlbo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New config from the `desk` or `paper` profile.
///
/// # Safety
/// `profile` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn jlbo_config_new(profile: *const c_char, out: *mut *mut JlboConfig) -> JlboStatus {
    guard(|| {
        if out.is_null() {
            return fail(JlboStatus::NullPointer, "null output handle");
        }
        let name = match read_str(profile) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match name.parse::<Profile>() {
            Ok(p) => {
                *out = Box::into_raw(Box::new(JlboConfig {
                    inner: SystemConfig::profile(p),
                }));
                JlboStatus::Ok
            }
            Err(e) => fail(JlboStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Lays the flat TOML keys of `text` over `cfg`.
///
/// # Safety
/// `cfg` is a live handle; `text` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn jlbo_config_apply_toml(cfg: *mut JlboConfig, text: *const c_char) -> JlboStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else {
            return fail(JlboStatus::NullPointer, "null config");
        };
        let text = match read_str(text) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match SystemConfig::from_toml(text, &cfg.inner) {
            Ok(c) => {
                cfg.inner = c;
                JlboStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn jlbo_config_set_seed(cfg: *mut JlboConfig, seed: u64) -> JlboStatus {
    guard(|| match cfg.as_mut() {
        Some(c) => {
            c.inner.seed = seed;
            JlboStatus::Ok
        }
        None => fail(JlboStatus::NullPointer, "null config"),
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn jlbo_config_set_trials(cfg: *mut JlboConfig, trials: u64) -> JlboStatus {
    guard(|| match cfg.as_mut() {
        Some(_) if trials == 0 => fail(JlboStatus::InvalidArgument, "trials must be positive"),
        Some(c) => {
            c.inner.trials = trials as usize;
            JlboStatus::Ok
        }
        None => fail(JlboStatus::NullPointer, "null config"),
    })
}

/// `axis` is `iterations`, `n_ris`, `snr` or `bs_ris_distance`.
///
/// # Safety
/// `cfg` is a live handle; `axis` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn jlbo_config_set_sweep(cfg: *mut JlboConfig, axis: *const c_char) -> JlboStatus {
    guard(|| {
        let Some(cfg) = cfg.as_mut() else {
            return fail(JlboStatus::NullPointer, "null config");
        };
        let axis = match read_str(axis) {
            Ok(s) => s,
            Err(s) => return s,
        };
        match axis.parse::<SweepAxis>() {
            Ok(a) => {
                cfg.inner.sweep = a;
                JlboStatus::Ok
            }
            Err(e) => fail(JlboStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `cfg` is NULL or a handle from [`jlbo_config_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jlbo_config_free(cfg: *mut JlboConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the sweep described by `cfg`.
///
/// # Safety
/// `cfg` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn jlbo_run(cfg: *const JlboConfig, out: *mut *mut JlboResults) -> JlboStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            return fail(JlboStatus::NullPointer, "null config");
        };
        if out.is_null() {
            return fail(JlboStatus::NullPointer, "null output handle");
        }
        match run_monte_carlo(&cfg.inner) {
            Ok(output) => {
                *out = Box::into_raw(Box::new(JlboResults {
                    output,
                    config: cfg.inner.clone(),
                }));
                JlboStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Number of records, or 0 for a NULL handle.
///
/// # Safety
/// `res` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jlbo_results_len(res: *const JlboResults) -> u64 {
    res.as_ref().map_or(0, |r| r.output.records.len() as u64)
}

/// Number of failed runs, or 0 for a NULL handle.
///
/// # Safety
/// `res` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jlbo_results_failures(res: *const JlboResults) -> u64 {
    res.as_ref().map_or(0, |r| r.output.failures.len() as u64)
}

/// Copies record `index` into `out`.
///
/// # Safety
/// `res` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn jlbo_results_get(res: *const JlboResults, index: u64, out: *mut JlboRecord) -> JlboStatus {
    guard(|| {
        let Some(res) = res.as_ref() else {
            return fail(JlboStatus::NullPointer, "null results");
        };
        if out.is_null() {
            return fail(JlboStatus::NullPointer, "null record");
        }
        let Some(r) = res.output.records.get(index as usize) else {
            return fail(
                JlboStatus::OutOfRange,
                format!("record {index} of {}", res.output.records.len()),
            );
        };
        *out = JlboRecord {
            trial: r.trial as u64,
            seed: r.seed,
            sweep_value: r.sweep_value,
            iteration: r.iteration as u64,
            algorithm: match r.algorithm {
                BeamPolicy::Jlbo => JlboAlgorithm::Jlbo,
                BeamPolicy::Random => JlboAlgorithm::Random,
                BeamPolicy::FixedRis => JlboAlgorithm::FixedRis,
            },
            nmse_position: r.nmse_position,
            nmse_kappa: r.nmse_kappa,
            crlb_total: r.crlb_total,
            residual: r.residual,
            wall_ms: r.wall_ms,
        };
        JlboStatus::Ok
    })
}

/// Writes the results to `path` as `csv`, `json` or `svg`.
///
/// # Safety
/// `res` is a live handle; `format` and `path` are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn jlbo_results_write(
    res: *const JlboResults,
    format: *const c_char,
    path: *const c_char,
) -> JlboStatus {
    guard(|| {
        let Some(res) = res.as_ref() else {
            return fail(JlboStatus::NullPointer, "null results");
        };
        let (format, path) = match (read_str(format), read_str(path)) {
            (Ok(f), Ok(p)) => (f, p),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let format = match format.parse::<OutputFormat>() {
            Ok(f) => f,
            Err(e) => return fail(JlboStatus::InvalidArgument, e.to_string()),
        };
        lift(emit(&res.output, &res.config, format, Path::new(path)))
    })
}

/// # Safety
/// `res` is NULL or a handle from [`jlbo_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn jlbo_results_free(res: *mut JlboResults) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// `||est - truth||^2 / ||truth||^2` over `len` entries.
///
/// # Safety
/// `est` and `truth` point to `len` readable doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn jlbo_nmse(est: *const f64, truth: *const f64, len: u64, out: *mut f64) -> JlboStatus {
    guard(|| {
        if est.is_null() || truth.is_null() || out.is_null() {
            return fail(JlboStatus::NullPointer, "null buffer");
        }
        let e = std::slice::from_raw_parts(est, len as usize);
        let t = std::slice::from_raw_parts(truth, len as usize);
        match nmse(e, t) {
            Ok(v) => {
                *out = v;
                JlboStatus::Ok
            }
            Err(err) => fail(status_of(&err), err.to_string()),
        }
    })
}
