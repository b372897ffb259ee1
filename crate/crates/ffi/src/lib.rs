//! C ABI over `cpisac`.
//!
//! Objects are opaque handles created by `*_from_json`, `*_simulate` or a SIC call
//! and released with the matching `*_free`. Every fallible call returns a
//! [`CpisacStatus`]; the message of the last failure on the calling thread
//! is available from [`cpisac_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cpisac::analytics::sinr_closed_form;
use cpisac::dsp::CMatrix;
use cpisac::esprit::sic_esprit;
use cpisac::experiment::{derive_seed, synthesize_trial, Experiment, Trial};
use cpisac::params::{apply_snr_override, derive_link};
use cpisac::rdm::{sic_dft, EstimateRecord, SicOutcome};
use cpisac::waveform::make_constellation;
use cpisac::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpisacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    Runtime = 4,
    OutOfRange = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Matrices stored in a simulated frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpisacComponent {
    Symbols = 0,
    Received = 1,
    Free = 2,
    Isi = 3,
    Ici = 4,
    Noise = 5,
}

/// One estimated target.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CpisacEstimate {
    pub tau_s: f64,
    pub fd_hz: f64,
    pub range_m: f64,
    pub velocity_mps: f64,
    pub alpha_re: f64,
    pub alpha_im: f64,
}

impl From<EstimateRecord> for CpisacEstimate {
    fn from(r: EstimateRecord) -> Self {
        Self {
            tau_s: r.tau_s,
            fd_hz: r.fd_hz,
            range_m: r.range_m,
            velocity_mps: r.velocity_mps,
            alpha_re: r.alpha_re,
            alpha_im: r.alpha_im,
        }
    }
}

/// Parsed scenario or experiment.
pub struct CpisacScenario {
    exp: Experiment,
}

/// One synthesized frame.
pub struct CpisacFrame {
    trial: Trial,
}

/// Output of a cancellation run.
pub struct CpisacEstimates {
    records: Vec<CpisacEstimate>,
    converged: bool,
    iterations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: CpisacStatus, msg: impl Into<String>) -> CpisacStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> CpisacStatus {
    let status = match e {
        Error::InvalidConfig(_)
        | Error::InvalidTarget(_)
        | Error::InvalidExperiment(_)
        | Error::UnsupportedConstellation(_)
        | Error::InvalidPlan(_)
        | Error::DegenerateWindow
        | Error::Json(_) => CpisacStatus::InvalidConfig,
        _ => CpisacStatus::Runtime,
    };
    fail(status, e.to_string())
}

fn guard<F: FnOnce() -> CpisacStatus>(f: F) -> CpisacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CpisacStatus::Panic, "internal panic"),
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cpisac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cpisac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses an experiment, a scenario or a bare scenario configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpisac_scenario_from_json(json: *const c_char, out: *mut *mut CpisacScenario) -> CpisacStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(CpisacStatus::NullPointer, "null argument");
        }
        let Ok(text) = CStr::from_ptr(json).to_str() else {
            return fail(CpisacStatus::InvalidUtf8, "configuration is not UTF-8");
        };
        let exp = match Experiment::from_json(text) {
            Ok(e) => e,
            Err(e) => return from_error(e),
        };
        if let Err(e) = exp.scenario.validate() {
            return from_error(e);
        }
        *out = Box::into_raw(Box::new(CpisacScenario { exp }));
        CpisacStatus::Ok
    })
}

/// # Safety
/// `s` must come from [`cpisac_scenario_from_json`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn cpisac_scenario_free(s: *mut CpisacScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of targets drawn per frame.
///
/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn cpisac_scenario_target_count(s: *const CpisacScenario) -> usize {
    s.as_ref().map_or(0, |s| s.exp.scenario.target_count())
}

/// Writes the 16-digit configuration hash and a terminating NUL into `buf`.
///
/// # Safety
/// `s` must be a live scenario handle and `buf` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cpisac_scenario_config_hash(s: *const CpisacScenario, buf: *mut c_char, len: usize) -> CpisacStatus {
    guard(|| {
        let (Some(s), false) = (s.as_ref(), buf.is_null()) else {
            return fail(CpisacStatus::NullPointer, "null argument");
        };
        let hash = s.exp.config_hash();
        if len < hash.len() + 1 {
            return fail(CpisacStatus::BufferTooSmall, format!("need {} bytes", hash.len() + 1));
        }
        ptr::copy_nonoverlapping(hash.as_ptr().cast::<c_char>(), buf, hash.len());
        *buf.add(hash.len()) = 0;
        CpisacStatus::Ok
    })
}

/// Closed-form SINR (linear) of the scenario's fixed targets.
///
/// # Safety
/// `s` must be a live scenario handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cpisac_sinr_closed_form(
    s: *const CpisacScenario,
    sinr_exact: *mut f64,
    sinr_asymptotic: *mut f64,
) -> CpisacStatus {
    guard(|| {
        let Some(s) = s.as_ref() else { return fail(CpisacStatus::NullPointer, "null scenario") };
        if sinr_exact.is_null() || sinr_asymptotic.is_null() {
            return fail(CpisacStatus::NullPointer, "null output");
        }
        let cfg = &s.exp.scenario.config;
        if s.exp.scenario.targets.is_empty() {
            return fail(CpisacStatus::InvalidConfig, "the scenario has no fixed targets");
        }
        let links = s.exp.scenario.targets.iter().map(|t| derive_link(t, cfg, 0.0)).collect::<Result<Vec<_>, _>>();
        let mut links = match links {
            Ok(l) => l,
            Err(e) => return from_error(e),
        };
        apply_snr_override(&mut links, cfg);
        let r = sinr_closed_form(cfg, &links);
        *sinr_exact = r.sinr_exact;
        *sinr_asymptotic = r.sinr_asymptotic;
        CpisacStatus::Ok
    })
}

/// Synthesizes one noisy frame. Equal seeds give identical frames.
///
/// # Safety
/// `s` must be a live scenario handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpisac_frame_simulate(
    s: *const CpisacScenario,
    seed: u64,
    out: *mut *mut CpisacFrame,
) -> CpisacStatus {
    guard(|| {
        let Some(s) = s.as_ref() else { return fail(CpisacStatus::NullPointer, "null scenario") };
        if out.is_null() {
            return fail(CpisacStatus::NullPointer, "null output");
        }
        let cfg = &s.exp.scenario.config;
        if s.exp.scenario.target_count() == 0 {
            return fail(CpisacStatus::InvalidConfig, "the scenario has no targets");
        }
        let constellation = match make_constellation(cfg.constellation) {
            Ok(c) => c,
            Err(e) => return from_error(e),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
        match synthesize_trial(&s.exp.scenario, &[cfg], &constellation, &mut rng) {
            Ok(mut t) => {
                *out = Box::into_raw(Box::new(CpisacFrame { trial: t.remove(0) }));
                CpisacStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `f` must come from [`cpisac_frame_simulate`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn cpisac_frame_free(f: *mut CpisacFrame) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Grid size: `rows` subcarriers by `cols` symbols.
///
/// # Safety
/// `f` must be a live frame handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cpisac_frame_dims(f: *const CpisacFrame, rows: *mut usize, cols: *mut usize) -> CpisacStatus {
    guard(|| {
        let Some(f) = f.as_ref() else { return fail(CpisacStatus::NullPointer, "null frame") };
        if rows.is_null() || cols.is_null() {
            return fail(CpisacStatus::NullPointer, "null output");
        }
        *rows = f.trial.frame.s.nrows();
        *cols = f.trial.frame.s.ncols();
        CpisacStatus::Ok
    })
}

fn component(f: &CpisacFrame, which: u32) -> Option<&CMatrix> {
    let comps = &f.trial.comps;
    Some(match which {
        x if x == CpisacComponent::Symbols as u32 => &f.trial.frame.s,
        x if x == CpisacComponent::Received as u32 => &comps.y,
        x if x == CpisacComponent::Free as u32 => &comps.y_free,
        x if x == CpisacComponent::Isi as u32 => &comps.y_isi,
        x if x == CpisacComponent::Ici as u32 => &comps.y_ici,
        x if x == CpisacComponent::Noise as u32 => &comps.z,
        _ => return None,
    })
}

/// Copies one component (a [`CpisacComponent`] value), column-major, into
/// `re`/`im` arrays of `len` elements each (`len` must be at least rows * cols).
///
/// # Safety
/// `f` must be a live frame handle; `re` and `im` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cpisac_frame_copy(
    f: *const CpisacFrame,
    which: u32,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> CpisacStatus {
    guard(|| {
        let Some(f) = f.as_ref() else { return fail(CpisacStatus::NullPointer, "null frame") };
        if re.is_null() || im.is_null() {
            return fail(CpisacStatus::NullPointer, "null output");
        }
        let Some(m) = component(f, which) else {
            return fail(CpisacStatus::OutOfRange, format!("unknown component {which}"));
        };
        if len < m.len() {
            return fail(CpisacStatus::BufferTooSmall, format!("need {} elements", m.len()));
        }
        for (i, z) in m.iter().enumerate() {
            *re.add(i) = z.re;
            *im.add(i) = z.im;
        }
        CpisacStatus::Ok
    })
}

unsafe fn run_sic(
    s: *const CpisacScenario,
    f: *const CpisacFrame,
    out: *mut *mut CpisacEstimates,
    use_esprit: bool,
) -> CpisacStatus {
    guard(|| {
        let (Some(s), Some(f)) = (s.as_ref(), f.as_ref()) else {
            return fail(CpisacStatus::NullPointer, "null handle");
        };
        if out.is_null() {
            return fail(CpisacStatus::NullPointer, "null output");
        }
        let exp = &s.exp;
        let cfg = &exp.scenario.config;
        let (y, sym) = (&f.trial.comps.y, &f.trial.frame.s);
        if y.nrows() != cfg.n || y.ncols() != cfg.m {
            return fail(CpisacStatus::InvalidConfig, "frame does not match the scenario grid");
        }
        let outcome: Result<SicOutcome, Error> = if use_esprit {
            sic_esprit(y, sym, cfg, &exp.sic, &exp.esprit_params()).map(|r| r.outcome)
        } else {
            sic_dft(y, sym, cfg, &exp.sic, &exp.cfar_params()).map(|r| r.outcome)
        };
        match outcome {
            Ok(o) => {
                let est = CpisacEstimates {
                    records: o.estimates.iter().map(|e| e.record(cfg).into()).collect(),
                    converged: o.converged,
                    iterations: o.iterations(),
                };
                *out = Box::into_raw(Box::new(est));
                CpisacStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// SIC-DFT on a frame.
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpisac_sic_dft(
    s: *const CpisacScenario,
    f: *const CpisacFrame,
    out: *mut *mut CpisacEstimates,
) -> CpisacStatus {
    run_sic(s, f, out, false)
}

/// SIC-ESPRIT on a frame. The model order defaults to the target count.
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpisac_sic_esprit(
    s: *const CpisacScenario,
    f: *const CpisacFrame,
    out: *mut *mut CpisacEstimates,
) -> CpisacStatus {
    run_sic(s, f, out, true)
}

/// # Safety
/// `e` must be a live estimates handle.
#[no_mangle]
pub unsafe extern "C" fn cpisac_estimates_len(e: *const CpisacEstimates) -> usize {
    e.as_ref().map_or(0, |e| e.records.len())
}

/// # Safety
/// `e` must be a live estimates handle.
#[no_mangle]
pub unsafe extern "C" fn cpisac_estimates_converged(e: *const CpisacEstimates) -> bool {
    e.as_ref().is_some_and(|e| e.converged)
}

/// # Safety
/// `e` must be a live estimates handle.
#[no_mangle]
pub unsafe extern "C" fn cpisac_estimates_iterations(e: *const CpisacEstimates) -> usize {
    e.as_ref().map_or(0, |e| e.iterations)
}

/// # Safety
/// `e` must be a live estimates handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cpisac_estimates_get(
    e: *const CpisacEstimates,
    index: usize,
    out: *mut CpisacEstimate,
) -> CpisacStatus {
    guard(|| {
        let Some(e) = e.as_ref() else { return fail(CpisacStatus::NullPointer, "null estimates") };
        if out.is_null() {
            return fail(CpisacStatus::NullPointer, "null output");
        }
        match e.records.get(index) {
            Some(r) => {
                *out = *r;
                CpisacStatus::Ok
            }
            None => fail(CpisacStatus::OutOfRange, format!("index {index} of {}", e.records.len())),
        }
    })
}

/// # Safety
/// `e` must come from a SIC call or be NULL.
#[no_mangle]
pub unsafe extern "C" fn cpisac_estimates_free(e: *mut CpisacEstimates) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}
