//! Error types shared by every module of the engine.
//!
//! Errors are split by how the caller should react: `InvalidInput` and
//! `Config` mean the request itself is malformed (CLI exit code 2), while
//! the numerical variants mean a computation was attempted and failed
//! (CLI exit code 1, with diagnostics preserved in the variant fields).

use thiserror::Error;

/// Unified error type for the G-expectation engine.
#[derive(Debug, Error)]
pub enum GexpError {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A run configuration is inconsistent (bad schema, impossible grid, …).
    #[error("configuration error: {0}")]
    Config(String),

    /// The explicit scheme's stability bound dt <= h^2 / (2 d sigma_max^2)
    /// was violated; solving anyway would destroy monotonicity.
    #[error(
        "CFL condition violated: dt={dt:.6e} exceeds bound {bound:.6e} \
         (h={h:.6e}, sigma_max_sq={sigma_max_sq:.6e}, dim={dim})"
    )]
    CflViolated {
        dt: f64,
        bound: f64,
        h: f64,
        sigma_max_sq: f64,
        dim: usize,
    },

    /// A finite-difference sweep produced a non-finite value. Under the CFL
    /// check this should be unreachable; it guards against NaN payoffs.
    #[error("numerical blow-up: non-finite value at time step {step}")]
    NumericalBlowup { step: usize },

    /// A point lies outside the truncated spatial domain of a grid function.
    #[error("point {point:?} outside grid domain [-{half_width}, {half_width}]^{dim}")]
    OutOfDomain {
        point: Vec<f64>,
        half_width: f64,
        dim: usize,
    },

    /// The Girsanov density exponent grew past the range of `exp`.
    /// Carries the offending path's integral diagnostics.
    #[error(
        "density overflow on path {path}: log-density {log_density:.6e} at step {step} \
         (ito={ito:.6e}, qv_form={qv_form:.6e})"
    )]
    DensityOverflow {
        path: usize,
        step: usize,
        log_density: f64,
        ito: f64,
        qv_form: f64,
    },

    /// An integrand emitted a value larger than its declared bound.
    #[error(
        "integrand bound violated: |h| = {observed:.6e} exceeds declared bound {declared:.6e} \
         at t = {t}"
    )]
    IntegrandBound {
        observed: f64,
        declared: f64,
        t: f64,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, GexpError>;

impl GexpError {
    /// Exit code the CLI maps this error to: 2 for malformed requests,
    /// 1 for numerical/runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            GexpError::InvalidInput(_) | GexpError::Config(_) | GexpError::CflViolated { .. } => 2,
            _ => 1,
        }
    }
}
