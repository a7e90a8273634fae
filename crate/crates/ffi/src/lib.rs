//! C interface to the `nearfield` library.
//!
//! Every function returns an [`NfStatus`]. On failure a message describing
//! the error is kept per thread and can be copied out with
//! [`nf_last_error`]. Objects are opaque and must be released with the
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nearfield::crb::CrbReport;
use nearfield::extract::{PolarCodebook, SearchGrids};
use nearfield::geometry::SystemConfig;
use nearfield::harness::{
    run_experiment, summarize, write_results, write_summary, ExperimentConfig,
};
use nearfield::pilots::{design_pilots, random_combiner};
use nearfield::pipeline::{estimate_los, AngleMode, EstimationReport};
use nearfield::signal::{add_noise, noise_variance, synthesize, Scenario, ScenarioSampler};
use nearfield::tensor::Tensor3;
use nearfield::Error;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    /// The estimator ran but could not produce a result.
    EstimationFailed = 4,
    Io = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NfComplex {
    pub re: f64,
    pub im: f64,
}

impl From<Complex64> for NfComplex {
    fn from(z: Complex64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NfSystemConfig {
    pub n_antennas: usize,
    pub n_rf: usize,
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    pub n_users: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
}

/// One propagation path. `angle` is in radians, `range` in meters.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NfPath {
    pub gain: NfComplex,
    pub delay: f64,
    pub angle: f64,
    pub range: f64,
}

/// A drawn LoS scenario: users, pilots and combiner.
pub struct NfScenario {
    inner: Scenario,
    book: Option<PolarCodebook>,
}

/// Result of one estimation call.
pub struct NfEstimate {
    inner: EstimationReport,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> NfStatus {
    match e {
        Error::Io(_) | Error::Csv(_) => NfStatus::Io,
        Error::AssociationFailed(_) | Error::NoDetection(_) | Error::NonFinite(_) => {
            NfStatus::EstimationFailed
        }
        _ => NfStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (NfStatus, String)>) -> NfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            NfStatus::Internal
        }
    }
}

fn lib<T>(r: nearfield::Result<T>) -> Result<T, (NfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (NfStatus, String) {
    (NfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (NfStatus, String) {
    (NfStatus::InvalidArgument, msg.into())
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (NfStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (NfStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (NfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn system(cfg: &NfSystemConfig) -> Result<SystemConfig, (NfStatus, String)> {
    lib(SystemConfig::new(
        cfg.n_antennas,
        cfg.n_rf,
        cfg.n_subcarriers,
        cfg.n_symbols,
        cfg.n_users,
        cfg.carrier_hz,
        cfg.bandwidth_hz,
    ))
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string. `needed` (optional) receives the full size
/// including the terminator; `BufferTooSmall` is returned if it does not fit.
///
/// # Safety
/// `buf` must point to `len` writable bytes (or be null with `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn nf_last_error(
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> NfStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    let size = msg.len() + 1;
    if let Some(n) = needed.as_mut() {
        *n = size;
    }
    if len < size {
        return NfStatus::BufferTooSmall;
    }
    if buf.is_null() {
        return NfStatus::NullPointer;
    }
    std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), msg.len());
    *buf.add(msg.len()) = 0;
    NfStatus::Ok
}

/// Rayleigh distance `2D²/λ` of the array described by `cfg`, in meters.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn nf_rayleigh_distance(
    cfg: *const NfSystemConfig,
    distance: *mut f64,
) -> NfStatus {
    guard(|| {
        let sys = system(deref(cfg, "cfg")?)?;
        *out(distance, "distance")? = sys.rayleigh_distance();
        Ok(())
    })
}

/// Draws a LoS scenario (user positions, gains, pilots and a random
/// combiner) from `seed`.
///
/// # Safety
/// Pointers must be valid or null. `*scenario` receives a new object.
#[no_mangle]
pub unsafe extern "C" fn nf_scenario_new_los(
    cfg: *const NfSystemConfig,
    seed: u64,
    scenario: *mut *mut NfScenario,
) -> NfStatus {
    guard(|| {
        let sys = system(deref(cfg, "cfg")?)?;
        let slot = out(scenario, "scenario")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampler = ScenarioSampler {
            max_excess_delay: 0.0,
            ..ScenarioSampler::default()
        };
        let paths = lib(sampler.los_paths(&sys, &mut rng))?;
        let pilots = lib(design_pilots(sys.n_symbols, sys.n_users, &mut rng))?;
        let comb = lib(random_combiner(sys.n_antennas, sys.n_rf, &mut rng))?;
        let inner = lib(Scenario::new(sys, paths, pilots, comb))?;
        *slot = Box::into_raw(Box::new(NfScenario { inner, book: None }));
        Ok(())
    })
}

/// Releases a scenario. Null is ignored.
///
/// # Safety
/// `scenario` must come from `nf_scenario_new_los` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nf_scenario_free(scenario: *mut NfScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Tensor dimensions `(P, M, T)` of the observations of a scenario.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn nf_scenario_dims(
    scenario: *const NfScenario,
    p: *mut usize,
    m: *mut usize,
    t: *mut usize,
) -> NfStatus {
    guard(|| {
        let sc = &deref(scenario, "scenario")?.inner;
        *out(p, "p")? = sc.cfg.n_subcarriers;
        *out(m, "m")? = sc.cfg.n_rf;
        *out(t, "t")? = sc.cfg.n_symbols;
        Ok(())
    })
}

/// True LoS path of `user`.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn nf_scenario_user(
    scenario: *const NfScenario,
    user: usize,
    path: *mut NfPath,
) -> NfStatus {
    guard(|| {
        let sc = &deref(scenario, "scenario")?.inner;
        let p = sc
            .paths
            .get(user)
            .and_then(|g| g.first())
            .ok_or_else(|| invalid(format!("user {user} out of range")))?;
        *out(path, "path")? = NfPath {
            gain: p.gain.into(),
            delay: p.delay,
            angle: p.angle,
            range: p.range,
        };
        Ok(())
    })
}

/// Received tensor `Y[p, m, t]` at index `p + P(m + M t)`. Noise at
/// `snr_db` is drawn from `seed`; pass infinity for noiseless data.
///
/// # Safety
/// `y` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn nf_scenario_observe(
    scenario: *const NfScenario,
    snr_db: f64,
    seed: u64,
    y: *mut NfComplex,
    len: usize,
) -> NfStatus {
    guard(|| {
        let sc = &deref(scenario, "scenario")?.inner;
        let clean = synthesize(sc);
        if len < clean.len() {
            return Err((
                NfStatus::BufferTooSmall,
                format!("need {} elements, got {len}", clean.len()),
            ));
        }
        if y.is_null() {
            return Err(null("y"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (noisy, _) = lib(add_noise(&clean, snr_db, &mut rng))?;
        let dst = std::slice::from_raw_parts_mut(y, clean.len());
        for (d, z) in dst.iter_mut().zip(noisy.data()) {
            *d = (*z).into();
        }
        Ok(())
    })
}

/// Per-user position CRB (m²) of the scenario at `snr_db`, written to
/// `crb[0..n_users]`.
///
/// # Safety
/// `crb` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn nf_crb_position(
    scenario: *const NfScenario,
    snr_db: f64,
    crb: *mut f64,
    len: usize,
) -> NfStatus {
    guard(|| {
        let sc = &deref(scenario, "scenario")?.inner;
        let k = sc.cfg.n_users;
        if len < k {
            return Err((
                NfStatus::BufferTooSmall,
                format!("need {k} elements, got {len}"),
            ));
        }
        if crb.is_null() {
            return Err(null("crb"));
        }
        let sigma2 = lib(noise_variance(&synthesize(sc), snr_db))?;
        if !(sigma2 > 0.0) {
            return Err(invalid("the bound needs a finite SNR"));
        }
        let report = lib(CrbReport::new(sc, sigma2))?;
        let dst = std::slice::from_raw_parts_mut(crb, k);
        dst.copy_from_slice(&report.position_per_user());
        Ok(())
    })
}

/// LoS estimation from observations `y` (layout as in
/// `nf_scenario_observe`) using the pilots and combiner of `scenario`.
/// `delay_aided` nonzero takes the range from the delay estimate.
///
/// # Safety
/// `y` must point to `len` readable elements. `*estimate` receives a new object.
#[no_mangle]
pub unsafe extern "C" fn nf_estimate_los(
    scenario: *mut NfScenario,
    y: *const NfComplex,
    len: usize,
    delay_aided: i32,
    estimate: *mut *mut NfEstimate,
) -> NfStatus {
    guard(|| {
        let holder = out(scenario, "scenario")?;
        let slot = out(estimate, "estimate")?;
        let sc = &holder.inner;
        let dims = (sc.cfg.n_subcarriers, sc.cfg.n_rf, sc.cfg.n_symbols);
        let n = dims.0 * dims.1 * dims.2;
        if len != n {
            return Err(invalid(format!("expected {n} elements, got {len}")));
        }
        if y.is_null() {
            return Err(null("y"));
        }
        let data = std::slice::from_raw_parts(y, n)
            .iter()
            .map(|z| Complex64::new(z.re, z.im))
            .collect();
        let tensor = lib(Tensor3::from_vec(dims, data))?;
        if holder.book.is_none() {
            let sampler = ScenarioSampler::default();
            let grids = SearchGrids::for_config(&sc.cfg, sampler.max_range, 0.0);
            holder.book = Some(lib(PolarCodebook::new(&sc.cfg, &grids, &sc.combiner))?);
        }
        let book = holder.book.as_ref().expect("built above");
        let mode = if delay_aided != 0 {
            AngleMode::DelayAided
        } else {
            AngleMode::Joint
        };
        let inner = lib(estimate_los(
            &tensor,
            &sc.pilots,
            book,
            mode,
            &Default::default(),
        ))?;
        *slot = Box::into_raw(Box::new(NfEstimate { inner }));
        Ok(())
    })
}

/// Releases an estimate. Null is ignored.
///
/// # Safety
/// `estimate` must come from `nf_estimate_los` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nf_estimate_free(estimate: *mut NfEstimate) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}

/// Estimated path and position `(x, y)` of `user`.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn nf_estimate_user(
    estimate: *const NfEstimate,
    user: usize,
    path: *mut NfPath,
    x: *mut f64,
    y: *mut f64,
) -> NfStatus {
    guard(|| {
        let rep = &deref(estimate, "estimate")?.inner;
        let p = rep
            .paths
            .get(user)
            .and_then(|g| g.first())
            .ok_or_else(|| invalid(format!("user {user} out of range")))?;
        let &(px, py) = rep
            .positions
            .get(user)
            .ok_or_else(|| invalid("estimate has no positions"))?;
        *out(path, "path")? = NfPath {
            gain: p.gain.into(),
            delay: p.delay,
            angle: p.angle,
            range: p.range,
        };
        *out(x, "x")? = px;
        *out(y, "y")? = py;
        Ok(())
    })
}

/// Channel NMSE of `estimate` against the true channels of `scenario`.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn nf_estimate_nmse(
    estimate: *const NfEstimate,
    scenario: *const NfScenario,
    nmse: *mut f64,
) -> NfStatus {
    guard(|| {
        let rep = &deref(estimate, "estimate")?.inner;
        let sc = &deref(scenario, "scenario")?.inner;
        *out(nmse, "nmse")? = lib(rep.score(sc))?.nmse;
        Ok(())
    })
}

/// Runs the experiment described by the TOML document `config_toml` and
/// writes `results.csv`, `timings.csv` and `summary.csv` into `out_dir`.
/// `threads == 0` uses one worker per core.
///
/// # Safety
/// Strings must be valid NUL-terminated UTF-8.
#[no_mangle]
pub unsafe extern "C" fn nf_run_experiment(
    config_toml: *const c_char,
    out_dir: *const c_char,
    threads: usize,
) -> NfStatus {
    guard(|| {
        let text = c_str(config_toml, "config_toml")?;
        let dir = Path::new(c_str(out_dir, "out_dir")?);
        let cfg = lib(ExperimentConfig::from_toml_str(text))?;
        let rows = lib(run_experiment(&cfg, (threads > 0).then_some(threads)))?;
        lib(write_results(&rows, dir))?;
        lib(write_summary(&summarize(&rows), &dir.join("summary.csv")))?;
        Ok(())
    })
}
