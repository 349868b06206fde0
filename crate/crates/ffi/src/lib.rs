//! C ABI for the mkvlsv particle engine.
//!
//! Every function returns an [`MkvStatus`]; on failure the message is available
//! from [`mkv_last_error`] on the same thread. Handles are opaque and must be
//! released with the matching `_free` function.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use mkvlsv::coefficients::{check_ellipticity, LsvModelSpec, ValidationGrid};
use mkvlsv::config::ModelConfig;
use mkvlsv::diagnostics::{reprice_calls, wasserstein_1d};
use mkvlsv::engine::{simulate, BandwidthChoice, PathRecorder, RecordSchedule, SimConfig};
use mkvlsv::market::{bs_call_price, dupire_local_vol, BsParams, CallSurface, VolClamp};
use mkvlsv::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MkvStatus {
    Ok = 0,
    InvalidArgument = 1,
    Validation = 2,
    Runtime = 3,
    NullPointer = 4,
    Panic = 5,
}

/// Validated model specification.
pub struct MkvModel {
    spec: LsvModelSpec,
    log_spot: f64,
}

/// Completed simulation with its recorded snapshots.
pub struct MkvRun {
    recorder: PathRecorder,
    steps: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: MkvStatus, msg: impl Into<String>) -> MkvStatus {
    set_error(msg.into());
    status
}

fn from_error(err: Error) -> MkvStatus {
    let status = if err.is_validation() {
        MkvStatus::Validation
    } else {
        MkvStatus::Runtime
    };
    fail(status, err.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), MkvStatus>) -> MkvStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MkvStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MkvStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait IntoStatus<T> {
    fn status(self) -> Result<T, MkvStatus>;
}

impl<T> IntoStatus<T> for mkvlsv::Result<T> {
    fn status(self) -> Result<T, MkvStatus> {
        self.map_err(from_error)
    }
}

unsafe fn input<'a>(data: *const f64, len: usize, name: &str) -> Result<&'a [f64], MkvStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(fail(MkvStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn output<'a>(data: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], MkvStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(fail(MkvStatus::NullPointer, format!("{name} is null")));
    }
    Ok(slice::from_raw_parts_mut(data, len))
}

unsafe fn write<T>(out: *mut T, value: T, name: &str) -> Result<(), MkvStatus> {
    if out.is_null() {
        return Err(fail(MkvStatus::NullPointer, format!("{name} is null")));
    }
    *out = value;
    Ok(())
}

unsafe fn handle<'a, T>(h: *const T, name: &str) -> Result<&'a T, MkvStatus> {
    h.as_ref().ok_or_else(|| fail(MkvStatus::NullPointer, format!("{name} is null")))
}

/// Message for the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn mkv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mkv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Black-Scholes call price with zero rates.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn mkv_bs_call_price(spot: f64, vol: f64, maturity: f64, strike: f64, out: *mut f64) -> MkvStatus {
    guard(|| {
        let params = BsParams::new(spot, vol, maturity, strike).status()?;
        write(out, bs_call_price(&params), "out")
    })
}

/// Builds and validates a model from its JSON description.
///
/// Relative file paths inside the JSON resolve against the working directory.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkv_model_from_json(json: *const c_char, out: *mut *mut MkvModel) -> MkvStatus {
    guard(|| {
        if json.is_null() {
            return Err(fail(MkvStatus::NullPointer, "json is null"));
        }
        if out.is_null() {
            return Err(fail(MkvStatus::NullPointer, "out is null"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| fail(MkvStatus::InvalidArgument, "json is not valid UTF-8"))?;
        let config: ModelConfig = serde_json::from_str(text).map_err(|e| from_error(e.into()))?;
        let spec = config.build(Path::new(".")).status()?;
        let model = MkvModel {
            spec,
            log_spot: config.initial.log_spot(),
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mkv_model_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mkv_model_free(model: *mut MkvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Uniform ellipticity bounds `m <= eig(a) <= M` over the standard validation grid.
///
/// # Safety
/// `model` must be a live handle; `m` and `big_m` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mkv_model_check_ellipticity(
    model: *const MkvModel,
    horizon: f64,
    m: *mut f64,
    big_m: *mut f64,
) -> MkvStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(fail(MkvStatus::InvalidArgument, "horizon must be positive"));
        }
        let bounds = check_ellipticity(&model.spec, &ValidationGrid::standard(horizon, model.log_spot)).status()?;
        write(m, bounds.m, "m")?;
        write(big_m, bounds.big_m, "big_m")
    })
}

/// Simulates the interacting system, recording the initial and terminal states.
///
/// A non-positive `bandwidth` selects the automatic rule. `workers == 0` uses the default pool.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkv_simulate(
    model: *const MkvModel,
    particles: usize,
    steps: usize,
    horizon: f64,
    bandwidth: f64,
    seed: u64,
    workers: usize,
    out: *mut *mut MkvRun,
) -> MkvStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if out.is_null() {
            return Err(fail(MkvStatus::NullPointer, "out is null"));
        }
        let mut config = SimConfig::new(particles, steps, horizon, seed);
        if bandwidth > 0.0 {
            config.bandwidth = BandwidthChoice::Fixed(bandwidth);
        }
        config.record = RecordSchedule::Endpoints;
        config.workers = (workers > 0).then_some(workers);
        let recorder = simulate(&model.spec, &config).status()?;
        *out = Box::into_raw(Box::new(MkvRun { recorder, steps }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`mkv_simulate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mkv_run_free(run: *mut MkvRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of particles in the run, 0 for a NULL handle.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mkv_run_particles(run: *const MkvRun) -> usize {
    run.as_ref().map_or(0, |r| r.recorder.terminal().len())
}

/// Copies terminal `(x1, x2)` in particle order. Both buffers hold `len` doubles.
///
/// # Safety
/// `run` must be a live handle; `x1` and `x2` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mkv_run_terminal(run: *const MkvRun, x1: *mut f64, x2: *mut f64, len: usize) -> MkvStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let terminal = run.recorder.terminal();
        if len != terminal.len() {
            return Err(fail(
                MkvStatus::InvalidArgument,
                format!("buffer length {len} != particle count {}", terminal.len()),
            ));
        }
        output(x1, len, "x1")?.copy_from_slice(terminal.x1());
        output(x2, len, "x2")?.copy_from_slice(terminal.x2());
        Ok(())
    })
}

/// Bandwidth used at `step` (0-based).
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkv_run_bandwidth(run: *const MkvRun, step: usize, out: *mut f64) -> MkvStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let value = *run
            .recorder
            .bandwidths()
            .get(step)
            .ok_or_else(|| fail(MkvStatus::InvalidArgument, format!("step {step} out of range")))?;
        write(out, value, "out")
    })
}

/// Reprices calls on the terminal snapshot. `targets` may be NULL.
///
/// # Safety
/// `run` must be a live handle; `strikes`, `prices`, `stderrs` (and `targets` if set) hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mkv_run_reprice(
    run: *const MkvRun,
    strikes: *const f64,
    targets: *const f64,
    n: usize,
    prices: *mut f64,
    stderrs: *mut f64,
) -> MkvStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let strikes = input(strikes, n, "strikes")?;
        let zeros = vec![0.0; n];
        let targets = if targets.is_null() { &zeros[..] } else { input(targets, n, "targets")? };
        let rows = reprice_calls(&run.recorder, strikes, run.steps, targets).status()?;
        let prices = output(prices, n, "prices")?;
        let stderrs = output(stderrs, n, "stderrs")?;
        for (i, row) in rows.iter().enumerate() {
            prices[i] = row.price;
            stderrs[i] = row.stderr;
        }
        Ok(())
    })
}

/// Order-`e` Wasserstein distance between two 1D samples.
///
/// # Safety
/// `a` holds `na` doubles, `b` holds `nb`, `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkv_wasserstein_1d(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    e: f64,
    out: *mut f64,
) -> MkvStatus {
    guard(|| {
        let d = wasserstein_1d(input(a, na, "a")?, input(b, nb, "b")?, e).status()?;
        write(out, d, "out")
    })
}

/// Local volatility from a row-major (maturity, strike) call price grid.
///
/// # Safety
/// `maturities` holds `nt` doubles, `strikes` `nk`, `prices` and `out` `nt * nk`.
#[no_mangle]
pub unsafe extern "C" fn mkv_dupire(
    spot: f64,
    maturities: *const f64,
    nt: usize,
    strikes: *const f64,
    nk: usize,
    prices: *const f64,
    vol_min: f64,
    vol_max: f64,
    out: *mut f64,
) -> MkvStatus {
    guard(|| {
        let n = nt
            .checked_mul(nk)
            .ok_or_else(|| fail(MkvStatus::InvalidArgument, "grid too large"))?;
        let surface = CallSurface::new(
            spot,
            input(maturities, nt, "maturities")?.to_vec(),
            input(strikes, nk, "strikes")?.to_vec(),
            input(prices, n, "prices")?.to_vec(),
        )
        .status()?;
        let clamp = VolClamp::new(vol_min, vol_max).status()?;
        let lv = dupire_local_vol(&surface, clamp).status()?;
        output(out, n, "out")?.copy_from_slice(lv.values());
        Ok(())
    })
}
