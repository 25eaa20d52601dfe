//! Exercises the C entry points as a foreign caller would: raw pointers in,
//! status codes out, every string round-tripped through the ABI's ownership
//! rules. The functions are `extern "C"`, so calling them from Rust checks
//! the same code a C binding hits; layout fidelity of the generated header
//! is cbindgen's contract and is pinned by `header_declares_every_symbol`.

use std::ffi::{CStr, CString};
use std::ptr;

use gexp_ffi::*;

fn last_error_text() -> Option<String> {
    let p = gexp_last_error();
    if p.is_null() {
        None
    } else {
        Some(unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
    }
}

fn expect_ok(status: GexpStatus) {
    assert_eq!(
        status,
        GexpStatus::Ok,
        "unexpected failure: {:?}",
        last_error_text()
    );
}

unsafe fn interval(sigma_low: f64, sigma_high: f64) -> *mut GexpTheta {
    let mut handle: *mut GexpTheta = ptr::null_mut();
    expect_ok(gexp_theta_interval1d_new(sigma_low, sigma_high, &mut handle));
    assert!(!handle.is_null());
    handle
}

unsafe fn g_value(theta: *const GexpTheta, a: &[f64]) -> f64 {
    let mut value = f64::NAN;
    expect_ok(gexp_g_function(theta, a.as_ptr(), &mut value));
    value
}

const MC_CONFIG: &str = r#"{
  "experiment": "mc",
  "theta": { "kind": "interval1d", "sigma_low": 0.5, "sigma_high": 1.0 },
  "grid": { "horizon": 1.0, "n_steps": 16 },
  "paths": 400,
  "seed": 9,
  "battery": [ { "form": "level", "payoff": { "kind": "square" }, "time": 1.0 } ],
  "family": { "kind": "constants" }
}"#;

#[test]
fn version_is_a_nonempty_semver_string() {
    let p = gexp_version();
    assert!(!p.is_null());
    let text = unsafe { CStr::from_ptr(p) }.to_str().unwrap();
    assert_eq!(text, env!("CARGO_PKG_VERSION"));
    assert!(text.starts_with(|c: char| c.is_ascii_digit()));
}

#[test]
fn interval_handle_evaluates_the_generator_exactly() {
    unsafe {
        let theta = interval(0.5, 1.0);

        let mut dim = 0usize;
        expect_ok(gexp_theta_dim(theta, &mut dim));
        assert_eq!(dim, 1);

        // G(a) = ½ sup σ² a: the high end takes positive curvature, the low
        // end negative. Both are exact rational values.
        assert_eq!(g_value(theta, &[2.0]), 1.0);
        assert_eq!(g_value(theta, &[-2.0]), -0.25);

        gexp_theta_free(theta);
    }
}

#[test]
fn singleton_and_finite_set_constructors_agree_with_the_interval() {
    unsafe {
        // 2x2 identity singleton: G(I) = ½ tr(I) = 1.
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut single: *mut GexpTheta = ptr::null_mut();
        expect_ok(gexp_theta_singleton_new(2, eye.as_ptr(), &mut single));
        assert_eq!(g_value(single, &eye), 1.0);
        gexp_theta_free(single);

        // Finite {0.5, 1.0} in 1-d picks the best member per sign, matching
        // the interval endpoints.
        let members = [0.5, 1.0];
        let mut finite: *mut GexpTheta = ptr::null_mut();
        expect_ok(gexp_theta_finite_new(1, 2, members.as_ptr(), &mut finite));
        assert_eq!(g_value(finite, &[2.0]), 1.0);
        assert_eq!(g_value(finite, &[-2.0]), -0.25);
        gexp_theta_free(finite);
    }
}

#[test]
fn nondegeneracy_floor_is_validated_and_failure_leaves_the_handle_usable() {
    unsafe {
        let theta = interval(0.5, 1.0);

        // min eigenvalue of γγᵀ over the set is 0.25, so 0.25 fits...
        expect_ok(gexp_theta_set_floor(theta, 0.25));

        // ...and 0.5 does not.
        let status = gexp_theta_set_floor(theta, 0.5);
        assert_eq!(status, GexpStatus::Config);
        let message = last_error_text().unwrap();
        assert!(message.contains("floor"), "unhelpful message: {message}");

        // The failed update must not have corrupted the handle.
        assert_eq!(g_value(theta, &[2.0]), 1.0);

        gexp_theta_free(theta);
    }
}

#[test]
fn null_pointers_come_back_as_status_codes_with_named_arguments() {
    unsafe {
        let mut dim = 0usize;
        let status = gexp_theta_dim(ptr::null(), &mut dim);
        assert_eq!(status, GexpStatus::NullPointer);
        assert!(last_error_text().unwrap().contains("theta"));

        let theta = interval(0.5, 1.0);
        let status = gexp_g_function(theta, ptr::null(), &mut 0.0);
        assert_eq!(status, GexpStatus::NullPointer);
        assert!(last_error_text().unwrap().contains("a_row_major"));

        // A successful call clears the thread-local error.
        let _ = g_value(theta, &[1.0]);
        assert_eq!(last_error_text(), None);

        gexp_theta_free(theta);
    }
}

#[test]
fn invalid_utf8_gets_its_own_status() {
    let bytes: [u8; 3] = [0xff, 0xfe, 0x00];
    let status = unsafe { gexp_config_validate(bytes.as_ptr().cast()) };
    assert_eq!(status, GexpStatus::Utf8);
    assert!(last_error_text().unwrap().contains("UTF-8"));
}

#[test]
fn config_validation_mirrors_the_cli_contract() {
    unsafe {
        let good = CString::new(MC_CONFIG).unwrap();
        expect_ok(gexp_config_validate(good.as_ptr()));

        // Unknown fields are named.
        let unknown = CString::new(MC_CONFIG.replace("\"paths\"", "\"paht_count\"")).unwrap();
        let status = gexp_config_validate(unknown.as_ptr());
        assert_eq!(status, GexpStatus::Config);
        assert!(last_error_text().unwrap().contains("paht_count"));

        // Malformed JSON reports the position.
        let broken = CString::new("{\n  \"experiment\": \n}").unwrap();
        let status = gexp_config_validate(broken.as_ptr());
        assert_eq!(status, GexpStatus::Config);
        let message = last_error_text().unwrap();
        assert!(message.contains("line"), "no position in: {message}");
    }
}

#[test]
fn run_json_returns_the_standard_report_envelope() {
    unsafe {
        let config = CString::new(MC_CONFIG).unwrap();
        let mut rendered: *mut std::os::raw::c_char = ptr::null_mut();
        let mut pass = false;
        expect_ok(gexp_run_json(
            config.as_ptr(),
            ptr::null(),
            &mut rendered,
            &mut pass,
        ));
        assert!(pass);
        assert!(!rendered.is_null());

        let text = CStr::from_ptr(rendered).to_str().unwrap().to_owned();
        gexp_string_free(rendered);

        let report: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(report["seed"], 9);
        assert_eq!(report["pass"], true);
        assert_eq!(report["config_sha256"].as_str().unwrap().len(), 64);
        let rows = report["results"].as_array().unwrap();
        assert_eq!(rows.len(), 1);

        // Upper expectation of W₁² over constant controls on σ ∈ [0.5, 1]
        // is 1 up to Monte Carlo error at 400 paths.
        let value = rows[0]["estimate"]["value"].as_f64().unwrap();
        assert!((value - 1.0).abs() < 0.25, "estimate drifted: {value}");
    }
}

#[test]
fn run_json_applies_seed_and_path_overrides() {
    unsafe {
        let config = CString::new(MC_CONFIG).unwrap();
        let overrides = GexpRunOverrides {
            has_seed: true,
            seed: 4242,
            paths: 128,
        };
        let mut rendered: *mut std::os::raw::c_char = ptr::null_mut();
        expect_ok(gexp_run_json(
            config.as_ptr(),
            &overrides,
            &mut rendered,
            ptr::null_mut(),
        ));
        let text = CStr::from_ptr(rendered).to_str().unwrap().to_owned();
        gexp_string_free(rendered);

        let report: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(report["seed"], 4242);
        assert_eq!(report["results"][0]["estimate"]["n_paths"], 128);
    }
}

#[test]
fn worker_pool_request_rejects_zero() {
    let status = gexp_set_threads(0);
    assert_eq!(status, GexpStatus::Config);

    // A nonzero request succeeds, or reports Runtime if the process pool is
    // already pinned (ordering against other tests is not fixed).
    let status = gexp_set_threads(2);
    assert!(
        matches!(status, GexpStatus::Ok | GexpStatus::Runtime),
        "unexpected status {status:?}: {:?}",
        last_error_text()
    );
}

#[test]
fn destructors_accept_null() {
    unsafe {
        gexp_theta_free(ptr::null_mut());
        gexp_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_symbol() {
    let header_path = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gexp.h");
    let header = std::fs::read_to_string(header_path).expect("build.rs generates include/gexp.h");

    assert!(header.contains("typedef struct GexpTheta GexpTheta;"));
    assert!(header.contains("GEXP_STATUS_OK = 0"));
    assert!(header.contains("GEXP_STATUS_CONFIG = 2"));
    for symbol in [
        "gexp_version",
        "gexp_last_error",
        "gexp_string_free",
        "gexp_theta_singleton_new",
        "gexp_theta_interval1d_new",
        "gexp_theta_finite_new",
        "gexp_theta_set_floor",
        "gexp_theta_dim",
        "gexp_theta_free",
        "gexp_g_function",
        "gexp_config_validate",
        "gexp_run_json",
        "gexp_set_threads",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
}
