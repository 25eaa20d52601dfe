//! C ABI for the gexp engine.
//!
//! The surface is deliberately small: opaque [`GexpTheta`] handles for
//! uncertainty sets, the generator `G` evaluated through a handle, and a
//! JSON-in/JSON-out entry point that runs a full experiment through the
//! same dispatcher as the CLI. Every function returns a [`GexpStatus`];
//! anything richer travels as JSON text so bindings never chase struct
//! layouts across versions.
//!
//! Conventions, enforced by every entry point:
//! - No panic crosses the boundary; a caught panic reports
//!   [`GexpStatus::Panic`].
//! - On any non-[`GexpStatus::Ok`] return, [`gexp_last_error`] yields a
//!   thread-local, NUL-terminated description of the failure.
//! - Strings handed out via `char**` are owned by the caller and released
//!   with [`gexp_string_free`]; handles with [`gexp_theta_free`].
//! - Matrix arguments are row-major `double` buffers of length `dim * dim`
//!   (members concatenated for finite sets).
//!
//! The matching C header is generated into `include/gexp.h` at build time.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use gexp_core::config::RunConfig;
use gexp_core::model::{g_function, matrix_from_rows, DMatrix, ThetaSet};
use gexp_core::runner::{run, RunOptions};
use gexp_core::GexpError;

/// Result code returned by every function in the gexp C ABI.
///
/// Anything other than `Ok` leaves a thread-local description readable via
/// `gexp_last_error()`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GexpStatus {
    /// The call succeeded.
    Ok = 0,
    /// A computation was attempted and failed (numerical blow-up, density
    /// overflow, I/O, …).
    Runtime = 1,
    /// The request itself is malformed: bad JSON, schema violation, or an
    /// argument outside its documented domain.
    Config = 2,
    /// A required pointer argument was NULL.
    NullPointer = 3,
    /// A panic was caught at the boundary; state may be inconsistent and the
    /// process should treat the library as poisoned.
    Panic = 4,
    /// A string argument was not valid UTF-8.
    Utf8 = 5,
}

/// Opaque handle to a bounded set of volatility matrices (the Θ of the
/// sublinear expectation). Create via the `gexp_theta_*_new` constructors,
/// release via `gexp_theta_free`.
pub struct GexpTheta {
    inner: ThetaSet,
}

/// Optional per-run overrides for `gexp_run_json`, mirroring the CLI's
/// `--seed` and `--paths` flags. Pass NULL to run the config as written.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GexpRunOverrides {
    /// When true, `seed` replaces the config's seed.
    pub has_seed: bool,
    /// Replacement seed; ignored unless `has_seed` is true.
    pub seed: u64,
    /// Replacement Monte Carlo path count; 0 means "no override".
    pub paths: usize,
}

// ---------------------------------------------------------------------------
// Thread-local error channel
// ---------------------------------------------------------------------------

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail {
    status: GexpStatus,
    message: String,
}

impl Fail {
    fn null(name: &str) -> Self {
        Fail {
            status: GexpStatus::NullPointer,
            message: format!("null pointer passed for `{name}`"),
        }
    }

    fn utf8(name: &str, err: std::str::Utf8Error) -> Self {
        Fail {
            status: GexpStatus::Utf8,
            message: format!("`{name}` is not valid UTF-8: {err}"),
        }
    }
}

impl From<GexpError> for Fail {
    fn from(err: GexpError) -> Self {
        // The core's exit-code split is exactly the Config/Runtime split:
        // 2 marks a malformed request, 1 a failed computation.
        let status = if err.exit_code() == 2 {
            GexpStatus::Config
        } else {
            GexpStatus::Runtime
        };
        Fail {
            status,
            message: err.to_string(),
        }
    }
}

fn set_last_error(message: &str) {
    // A NUL inside the message would truncate it; replace rather than fail.
    let owned = CString::new(message.replace('\0', "\u{fffd}"))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(owned));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic of unknown type".to_string()
    }
}

/// Runs the body with a panic net and routes failures into the status code
/// plus the thread-local message.
fn guarded<F: FnOnce() -> Result<(), Fail>>(body: F) -> GexpStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => GexpStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            set_last_error(&panic_text(payload));
            GexpStatus::Panic
        }
    }
}

// ---------------------------------------------------------------------------
// Argument marshalling helpers
// ---------------------------------------------------------------------------

unsafe fn read_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(Fail::null(name));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| Fail::utf8(name, e))
}

unsafe fn read_matrix(
    dim: usize,
    entries: *const f64,
    name: &str,
) -> Result<DMatrix<f64>, Fail> {
    if entries.is_null() {
        return Err(Fail::null(name));
    }
    if dim == 0 {
        return Err(Fail {
            status: GexpStatus::Config,
            message: format!("`{name}` needs dim >= 1"),
        });
    }
    let len = dim.checked_mul(dim).ok_or_else(|| Fail {
        status: GexpStatus::Config,
        message: format!("`{name}`: dim * dim overflows"),
    })?;
    let flat = std::slice::from_raw_parts(entries, len);
    let rows: Vec<Vec<f64>> = flat.chunks_exact(dim).map(<[f64]>::to_vec).collect();
    Ok(matrix_from_rows(&rows)?)
}

unsafe fn write_out<T>(ptr: *mut T, value: T, name: &str) -> Result<(), Fail> {
    if ptr.is_null() {
        return Err(Fail::null(name));
    }
    ptr.write(value);
    Ok(())
}

unsafe fn theta_ref<'a>(ptr: *const GexpTheta, name: &str) -> Result<&'a ThetaSet, Fail> {
    if ptr.is_null() {
        return Err(Fail::null(name));
    }
    Ok(&(*ptr).inner)
}

fn install_theta(theta: ThetaSet, out: *mut *mut GexpTheta) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::null("out_theta"));
    }
    let handle = Box::into_raw(Box::new(GexpTheta { inner: theta }));
    unsafe { out.write(handle) };
    Ok(())
}

// ---------------------------------------------------------------------------
// Library metadata and error retrieval
// ---------------------------------------------------------------------------

/// Returns the library version as a static NUL-terminated string.
/// The pointer is valid for the lifetime of the process; do not free it.
#[no_mangle]
pub extern "C" fn gexp_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Returns the thread-local message describing the most recent failure on
/// this thread, or NULL if the last call succeeded. The pointer stays valid
/// until the next gexp call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn gexp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |msg| msg.as_ptr())
    })
}

/// Releases a string previously returned through a `char**` out-parameter.
/// NULL is accepted and ignored.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from this library's out-parameters,
/// passed at most once.
#[no_mangle]
pub unsafe extern "C" fn gexp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Uncertainty-set handles
// ---------------------------------------------------------------------------

/// Creates a single-matrix (classical) uncertainty set from a row-major
/// `dim x dim` buffer.
///
/// # Safety
/// `entries_row_major` must point to `dim * dim` readable doubles;
/// `out_theta` must be a valid pointer to a `GexpTheta*` slot.
#[no_mangle]
pub unsafe extern "C" fn gexp_theta_singleton_new(
    dim: usize,
    entries_row_major: *const f64,
    out_theta: *mut *mut GexpTheta,
) -> GexpStatus {
    guarded(|| {
        let matrix = read_matrix(dim, entries_row_major, "entries_row_major")?;
        install_theta(ThetaSet::singleton(matrix)?, out_theta)
    })
}

/// Creates the one-dimensional interval set σ ∈ [sigma_low, sigma_high].
///
/// # Safety
/// `out_theta` must be a valid pointer to a `GexpTheta*` slot.
#[no_mangle]
pub unsafe extern "C" fn gexp_theta_interval1d_new(
    sigma_low: f64,
    sigma_high: f64,
    out_theta: *mut *mut GexpTheta,
) -> GexpStatus {
    guarded(|| install_theta(ThetaSet::interval1d(sigma_low, sigma_high)?, out_theta))
}

/// Creates a finite uncertainty set from `n_members` row-major `dim x dim`
/// matrices stored back to back (member-major).
///
/// # Safety
/// `entries_row_major` must point to `n_members * dim * dim` readable
/// doubles; `out_theta` must be a valid pointer to a `GexpTheta*` slot.
#[no_mangle]
pub unsafe extern "C" fn gexp_theta_finite_new(
    dim: usize,
    n_members: usize,
    entries_row_major: *const f64,
    out_theta: *mut *mut GexpTheta,
) -> GexpStatus {
    guarded(|| {
        if entries_row_major.is_null() {
            return Err(Fail::null("entries_row_major"));
        }
        if dim == 0 || n_members == 0 {
            return Err(Fail {
                status: GexpStatus::Config,
                message: "finite set needs dim >= 1 and n_members >= 1".to_string(),
            });
        }
        let per = dim * dim;
        let mut members = Vec::with_capacity(n_members);
        for i in 0..n_members {
            members.push(read_matrix(dim, entries_row_major.add(i * per), "entries_row_major")?);
        }
        install_theta(ThetaSet::finite_set(members)?, out_theta)
    })
}

/// Attaches a nondegeneracy floor σ₀ (γγᵀ ⪰ σ₀·I across the set), validating
/// it against the smallest eigenvalue over the members. On failure the
/// handle is left unchanged.
///
/// # Safety
/// `theta` must be a live handle from a `gexp_theta_*_new` constructor.
#[no_mangle]
pub unsafe extern "C" fn gexp_theta_set_floor(
    theta: *mut GexpTheta,
    sigma0: f64,
) -> GexpStatus {
    guarded(|| {
        if theta.is_null() {
            return Err(Fail::null("theta"));
        }
        let slot = &mut (*theta).inner;
        let updated = slot.clone().with_nondegeneracy_floor(sigma0)?;
        *slot = updated;
        Ok(())
    })
}

/// Writes the spatial dimension of the set into `out_dim`.
///
/// # Safety
/// `theta` must be a live handle; `out_dim` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gexp_theta_dim(
    theta: *const GexpTheta,
    out_dim: *mut usize,
) -> GexpStatus {
    guarded(|| {
        let set = theta_ref(theta, "theta")?;
        write_out(out_dim, set.dim(), "out_dim")
    })
}

/// Releases a handle created by a `gexp_theta_*_new` constructor.
/// NULL is accepted and ignored.
///
/// # Safety
/// `theta` must be NULL or a live handle, passed at most once.
#[no_mangle]
pub unsafe extern "C" fn gexp_theta_free(theta: *mut GexpTheta) {
    if !theta.is_null() {
        drop(Box::from_raw(theta));
    }
}

// ---------------------------------------------------------------------------
// The generator G
// ---------------------------------------------------------------------------

/// Evaluates the generator G(A) = sup over the set of ½·tr(γγᵀA) for a
/// symmetric `dim x dim` matrix `A` given row-major.
///
/// # Safety
/// `theta` must be a live handle; `a_row_major` must point to `dim * dim`
/// readable doubles where `dim` matches the handle; `out_value` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gexp_g_function(
    theta: *const GexpTheta,
    a_row_major: *const f64,
    out_value: *mut f64,
) -> GexpStatus {
    guarded(|| {
        let set = theta_ref(theta, "theta")?;
        let a = read_matrix(set.dim(), a_row_major, "a_row_major")?;
        let value = g_function(set, &a)?;
        write_out(out_value, value, "out_value")
    })
}

// ---------------------------------------------------------------------------
// Experiment runs
// ---------------------------------------------------------------------------

/// Parses and validates a run configuration without executing it. Returns
/// `Ok` when the config would be accepted by `gexp_run_json`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gexp_config_validate(config_json: *const c_char) -> GexpStatus {
    guarded(|| {
        let text = read_str(config_json, "config_json")?;
        let config = RunConfig::from_json(text)?;
        config.validate()?;
        Ok(())
    })
}

/// Runs one experiment from a JSON configuration and hands back the full
/// JSON report (envelope with config hash, seed, and results). `overrides`
/// may be NULL; `out_pass` may be NULL if the caller only wants the report,
/// otherwise it receives the report's pass verdict. Per-path CSV dumping is
/// a CLI concern and is not exposed here.
///
/// The report string is owned by the caller: release with
/// `gexp_string_free`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `overrides` NULL or a
/// valid pointer; `out_report_json` a valid pointer to a `char*` slot;
/// `out_pass` NULL or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gexp_run_json(
    config_json: *const c_char,
    overrides: *const GexpRunOverrides,
    out_report_json: *mut *mut c_char,
    out_pass: *mut bool,
) -> GexpStatus {
    guarded(|| {
        let text = read_str(config_json, "config_json")?;
        if out_report_json.is_null() {
            return Err(Fail::null("out_report_json"));
        }
        let config = RunConfig::from_json(text)?;
        let mut opts = RunOptions::default();
        if !overrides.is_null() {
            let ov = *overrides;
            if ov.has_seed {
                opts.seed = Some(ov.seed);
            }
            if ov.paths > 0 {
                opts.paths = Some(ov.paths);
            }
        }
        let outcome = run(config, &opts)?;
        let rendered = serde_json::to_string_pretty(&outcome.report).map_err(GexpError::from)?;
        let owned = CString::new(rendered).expect("JSON text contains no NUL");
        out_report_json.write(owned.into_raw());
        if !out_pass.is_null() {
            out_pass.write(outcome.pass);
        }
        Ok(())
    })
}

/// Caps the global worker pool used by all subsequent runs in this process.
/// Must be called before the first run (the pool is created lazily and then
/// fixed); later calls fail with `Runtime`.
#[no_mangle]
pub extern "C" fn gexp_set_threads(n_threads: usize) -> GexpStatus {
    guarded(|| {
        if n_threads == 0 {
            return Err(Fail {
                status: GexpStatus::Config,
                message: "n_threads must be >= 1".to_string(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n_threads)
            .build_global()
            .map_err(|e| Fail {
                status: GexpStatus::Runtime,
                message: format!("worker pool already initialized: {e}"),
            })
    })
}
