use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mkvlsv_ffi::*;

fn last_error() -> String {
    let p = mkv_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn model(json: &str) -> (MkvStatus, *mut MkvModel) {
    let text = CString::new(json).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { mkv_model_from_json(text.as_ptr(), &mut out) };
    (status, out)
}

#[test]
fn bs_price_matches_closed_form() {
    let mut price = 0.0;
    let status = unsafe { mkv_bs_call_price(1.0, 0.2, 1.0, 1.0, &mut price) };
    assert_eq!(status, MkvStatus::Ok);
    // ATM zero-rate call: S (2N(σ√T/2) - 1)
    assert!((price - 0.0796556745540579629).abs() < 1e-12);
    let status = unsafe { mkv_bs_call_price(1.0, -0.2, 1.0, 1.0, &mut price) };
    assert_eq!(status, MkvStatus::Validation);
    assert!(last_error().contains("vol"));
}

#[test]
fn null_pointers_are_reported() {
    let status = unsafe { mkv_bs_call_price(1.0, 0.2, 1.0, 1.0, ptr::null_mut()) };
    assert_eq!(status, MkvStatus::NullPointer);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mkv_model_from_json(ptr::null(), &mut out) }, MkvStatus::NullPointer);
    assert_eq!(unsafe { mkv_run_particles(ptr::null()) }, 0);
    unsafe {
        mkv_model_free(ptr::null_mut());
        mkv_run_free(ptr::null_mut());
    }
}

#[test]
fn invalid_correlation_is_a_validation_error() {
    let (status, handle) = model(r#"{"local_vol": {"flat": 0.2}, "correlation": 1.5}"#);
    assert_eq!(status, MkvStatus::Validation);
    assert!(handle.is_null());
    assert!(last_error().contains("correlation"));
    let (status, _) = model(r#"{"local_vol": {"flat": 0.2}, "bogus": 1}"#);
    assert_eq!(status, MkvStatus::Validation);
}

#[test]
fn simulate_and_reprice() {
    let (status, handle) = model(r#"{"local_vol": {"flat": 0.2}, "correlation": -0.5}"#);
    assert_eq!(status, MkvStatus::Ok, "{}", if status == MkvStatus::Ok { String::new() } else { last_error() });
    let (mut m, mut big_m) = (0.0, 0.0);
    assert_eq!(unsafe { mkv_model_check_ellipticity(handle, 1.0, &mut m, &mut big_m) }, MkvStatus::Ok);
    assert!(m > 0.0 && big_m >= m);

    let mut run = ptr::null_mut();
    let status = unsafe { mkv_simulate(handle, 2000, 10, 0.5, 0.0, 7, 1, &mut run) };
    assert_eq!(status, MkvStatus::Ok);
    assert_eq!(unsafe { mkv_run_particles(run) }, 2000);

    let mut x1 = vec![0.0; 2000];
    let mut x2 = vec![0.0; 2000];
    assert_eq!(unsafe { mkv_run_terminal(run, x1.as_mut_ptr(), x2.as_mut_ptr(), 2000) }, MkvStatus::Ok);
    assert!(x1.iter().chain(&x2).all(|v| v.is_finite()));
    assert_eq!(
        unsafe { mkv_run_terminal(run, x1.as_mut_ptr(), x2.as_mut_ptr(), 10) },
        MkvStatus::InvalidArgument
    );

    let mut h = 0.0;
    assert_eq!(unsafe { mkv_run_bandwidth(run, 0, &mut h) }, MkvStatus::Ok);
    assert!(h > 0.0);
    assert_eq!(unsafe { mkv_run_bandwidth(run, 10, &mut h) }, MkvStatus::InvalidArgument);

    let strikes = [0.9, 1.0, 1.1];
    let mut prices = [0.0; 3];
    let mut errs = [0.0; 3];
    let status = unsafe {
        mkv_run_reprice(run, strikes.as_ptr(), ptr::null(), 3, prices.as_mut_ptr(), errs.as_mut_ptr())
    };
    assert_eq!(status, MkvStatus::Ok);
    assert!(prices[0] > prices[1] && prices[1] > prices[2]);
    assert!(errs.iter().all(|e| *e > 0.0));
    let status = unsafe { mkv_run_reprice(run, ptr::null(), ptr::null(), 0, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(status, MkvStatus::Validation);

    unsafe {
        mkv_run_free(run);
        mkv_model_free(handle);
    }
}

#[test]
fn wasserstein_of_shift() {
    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [0.5, 1.5, 2.5, 3.5];
    let mut d = 0.0;
    assert_eq!(unsafe { mkv_wasserstein_1d(a.as_ptr(), 4, b.as_ptr(), 4, 1.0, &mut d) }, MkvStatus::Ok);
    assert!((d - 0.5).abs() < 1e-12);
    assert_eq!(
        unsafe { mkv_wasserstein_1d(a.as_ptr(), 4, b.as_ptr(), 4, 0.5, &mut d) },
        MkvStatus::Validation
    );
}

#[test]
fn dupire_recovers_flat_vol() {
    let maturities: Vec<f64> = (1..=8).map(|i| 0.25 * i as f64).collect();
    let strikes: Vec<f64> = (0..=40).map(|j| 0.6 + 0.02 * j as f64).collect();
    let mut prices = Vec::new();
    for &t in &maturities {
        for &k in &strikes {
            let mut p = 0.0;
            assert_eq!(unsafe { mkv_bs_call_price(1.0, 0.25, t, k, &mut p) }, MkvStatus::Ok);
            prices.push(p);
        }
    }
    let mut out = vec![0.0; prices.len()];
    let status = unsafe {
        mkv_dupire(
            1.0,
            maturities.as_ptr(),
            maturities.len(),
            strikes.as_ptr(),
            strikes.len(),
            prices.as_ptr(),
            0.05,
            1.0,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, MkvStatus::Ok, "{}", last_error());
    let nk = strikes.len();
    let mid = out[3 * nk + nk / 2];
    assert!((mid - 0.25).abs() < 5e-3, "{mid}");

    prices[3 * nk + nk / 2] += 0.05;
    let status = unsafe {
        mkv_dupire(
            1.0,
            maturities.as_ptr(),
            maturities.len(),
            strikes.as_ptr(),
            strikes.len(),
            prices.as_ptr(),
            0.05,
            1.0,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, MkvStatus::Validation);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(mkv_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/mkvlsv.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "mkv_last_error",
        "mkv_version",
        "mkv_bs_call_price",
        "mkv_model_from_json",
        "mkv_model_free",
        "mkv_model_check_ellipticity",
        "mkv_simulate",
        "mkv_run_free",
        "mkv_run_particles",
        "mkv_run_terminal",
        "mkv_run_bandwidth",
        "mkv_run_reprice",
        "mkv_wasserstein_1d",
        "mkv_dupire",
        "typedef struct MkvModel MkvModel",
        "typedef struct MkvRun MkvRun",
        "MKV_STATUS_VALIDATION = 2",
        "MKV_STATUS_RUNTIME = 3",
    ] {
        assert!(text.contains(name), "header is missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(header())
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
