//! Discrete stochastic calculus along simulated paths: Itô integrals,
//! quadratic variation, the exponential density D, and the drift-removed
//! process B̂.
//!
//! Everything is left-endpoint (Itô) discretization: at step k the
//! integrand is evaluated at (t_k, B_{t_k}), before the increment
//! ΔB_k = B_{t_{k+1}} − B_{t_k} is consumed. With s_k := h_k·ΔB_k,
//!
//! * Itô integral:    I_{k+1} = I_k + s_k,
//! * density form:    Q_{k+1} = Q_k + s_k²  (= ∫ h·(d⟨B⟩ h)),
//! * log-density:     log D = I − ½Q  (exact by construction),
//! * drift removal:   B̂_{k+1} = B̂_k + ΔB_k − s_k·ΔB_k.
//!
//! The density is kept in log space throughout; it is exponentiated only
//! at the point of use, and estimators that need weighted means recombine
//! in log space (see [`crate::numerics::weighted_mean_log_space`]).

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{GexpError, Result};
use crate::model::PathBundle;

/// log(f64::MAX) is ≈ 709.7827; beyond this the density itself is not
/// representable and the transform reports the offending path.
pub(crate) const LOG_DENSITY_LIMIT: f64 = 709.78;

// ---------------------------------------------------------------------------
// Integrands
// ---------------------------------------------------------------------------

type MarkovRule = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// A drift integrand h: either a constant vector or a bounded Markov rule
/// (t, B_t) ↦ h ∈ ℝ^d. Boundedness is the working surrogate for the
/// integrability the continuous theory asks of h, and it is enforced: a
/// Markov rule that exceeds its declared bound is a reported error, not a
/// silent degradation.
#[derive(Clone)]
pub enum Integrand {
    Constant {
        h: Vec<f64>,
    },
    Markov {
        rule: Arc<MarkovRule>,
        dim: usize,
        /// Declared sup of |h| (Euclidean); checked at every evaluation.
        h_max: f64,
        /// Declared Lipschitz constant in the state; recorded for reports.
        lipschitz: f64,
        label: String,
    },
}

impl std::fmt::Debug for Integrand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Integrand::Constant { h } => f.debug_struct("Constant").field("h", h).finish(),
            Integrand::Markov {
                dim,
                h_max,
                lipschitz,
                label,
                ..
            } => f
                .debug_struct("Markov")
                .field("dim", dim)
                .field("h_max", h_max)
                .field("lipschitz", lipschitz)
                .field("label", label)
                .finish(),
        }
    }
}

impl Integrand {
    /// Constant integrand h(t, x) ≡ h.
    pub fn constant(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() || h.len() > 2 {
            return Err(GexpError::InvalidInput(format!(
                "integrand dimension must be 1 or 2, got {}",
                h.len()
            )));
        }
        if h.iter().any(|c| !c.is_finite()) {
            return Err(GexpError::InvalidInput(
                "integrand components must be finite".to_string(),
            ));
        }
        Ok(Integrand::Constant { h })
    }

    /// Zero integrand in dimension `dim` (the identity transform).
    pub fn zero(dim: usize) -> Result<Self> {
        Self::constant(vec![0.0; dim])
    }

    /// Bounded Markov integrand. `rule` writes h(t, state) into its output
    /// slice; `h_max` is the declared sup of |h| and is enforced.
    pub fn markov(
        dim: usize,
        rule: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        h_max: f64,
        lipschitz: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(GexpError::InvalidInput(format!(
                "integrand dimension must be 1 or 2, got {dim}"
            )));
        }
        if !(h_max.is_finite() && h_max >= 0.0) || !(lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(GexpError::InvalidInput(
                "integrand bound and Lipschitz constant must be finite and nonnegative"
                    .to_string(),
            ));
        }
        Ok(Integrand::Markov {
            rule: Arc::new(rule),
            dim,
            h_max,
            lipschitz,
            label: label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Integrand::Constant { h } => h.len(),
            Integrand::Markov { dim, .. } => *dim,
        }
    }

    /// Sup of |h| (exact for constants, declared for Markov rules).
    pub fn h_max(&self) -> f64 {
        match self {
            Integrand::Constant { h } => h.iter().map(|c| c * c).sum::<f64>().sqrt(),
            Integrand::Markov { h_max, .. } => *h_max,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Integrand::Constant { h } => {
                if h.iter().all(|&c| c == 0.0) {
                    "h=0".to_string()
                } else {
                    format!("h={h:?}")
                }
            }
            Integrand::Markov { label, .. } => label.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Integrand::Constant { h } if h.iter().all(|&c| c == 0.0))
    }

    /// Evaluates h(t, state) into `out`, enforcing the declared bound.
    pub fn eval_into(&self, t: f64, state: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Integrand::Constant { h } => {
                out.copy_from_slice(h);
                Ok(())
            }
            Integrand::Markov {
                rule, dim, h_max, ..
            } => {
                rule(t, state, out);
                let norm = out[..*dim].iter().map(|c| c * c).sum::<f64>().sqrt();
                if norm > h_max * (1.0 + 1e-12) {
                    return Err(GexpError::IntegrandBound {
                        observed: norm,
                        declared: *h_max,
                        t,
                    });
                }
                Ok(())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Per-path, per-time arrays
// ---------------------------------------------------------------------------

/// A dense [paths × times × width] array of per-path time series (width 1
/// for scalars, d for vectors, d² for matrices, row-major in the last
/// factor).
#[derive(Debug, Clone)]
pub struct PathArray {
    values: Vec<f64>,
    n_times: usize,
    width: usize,
}

impl PathArray {
    fn zeros(n_paths: usize, n_times: usize, width: usize) -> Self {
        PathArray {
            values: vec![0.0; n_paths * n_times * width],
            n_times,
            width,
        }
    }

    pub fn n_paths(&self) -> usize {
        self.values.len() / (self.n_times * self.width)
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The width-sized record for path `m` at time index `k`.
    pub fn at(&self, m: usize, k: usize) -> &[f64] {
        let start = (m * self.n_times + k) * self.width;
        &self.values[start..start + self.width]
    }

    /// Scalar access (width-1 arrays).
    pub fn scalar(&self, m: usize, k: usize) -> f64 {
        debug_assert_eq!(self.width, 1);
        self.values[m * self.n_times + k]
    }

    fn rows_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        self.values.par_chunks_mut(self.n_times * self.width)
    }
}

// ---------------------------------------------------------------------------
// Streaming accumulator (shared by the array builders and the sweeps)
// ---------------------------------------------------------------------------

/// Left-endpoint transform state for one path, advanced one increment at
/// a time. The caller owns the controlled state B (it is also needed to
/// feed control policies); the accumulator owns everything derived.
#[derive(Debug, Clone)]
pub(crate) struct TransformAccumulator<'a> {
    integrand: &'a Integrand,
    dim: usize,
    pub b: [f64; 2],
    pub b_hat: [f64; 2],
    pub ito: f64,
    pub qv_form: f64,
    /// Realized per-coordinate quadratic variation of B̂: Σ (ΔB̂ⁱ)².
    pub qv_hat: [f64; 2],
    hvec: [f64; 2],
}

impl<'a> TransformAccumulator<'a> {
    pub(crate) fn new(integrand: &'a Integrand) -> Self {
        TransformAccumulator {
            integrand,
            dim: integrand.dim(),
            b: [0.0; 2],
            b_hat: [0.0; 2],
            ito: 0.0,
            qv_form: 0.0,
            qv_hat: [0.0; 2],
            hvec: [0.0; 2],
        }
    }

    /// Consumes ΔB over (t_k, t_{k+1}]: evaluates h at the left endpoint
    /// (t_k, B_{t_k}), then updates the integral, the density form, the
    /// drift-removed process, and B itself.
    pub(crate) fn advance(&mut self, t_k: f64, delta_b: &[f64]) -> Result<()> {
        let d = self.dim;
        self.integrand
            .eval_into(t_k, &self.b[..d], &mut self.hvec[..d])?;
        let mut s = 0.0;
        for (h, db) in self.hvec[..d].iter().zip(delta_b) {
            s += h * db;
        }
        self.ito += s;
        self.qv_form += s * s;
        for (c, &db) in delta_b.iter().enumerate().take(d) {
            let dh = db - s * db;
            self.b_hat[c] += dh;
            self.qv_hat[c] += dh * dh;
            self.b[c] += db;
        }
        Ok(())
    }

    /// log D_t = ∫h·dB − ½∫h·(d⟨B⟩h), exactly as accumulated.
    pub(crate) fn log_density(&self) -> f64 {
        self.ito - 0.5 * self.qv_form
    }
}

// ---------------------------------------------------------------------------
// Array-producing operations on materialized bundles
// ---------------------------------------------------------------------------

fn check_dims(h: &Integrand, bundle: &PathBundle) -> Result<()> {
    if h.dim() != bundle.dim() {
        return Err(GexpError::InvalidInput(format!(
            "integrand dimension {} does not match bundle dimension {}",
            h.dim(),
            bundle.dim()
        )));
    }
    Ok(())
}

/// The realized increment ΔB_k of a stored path (difference of recorded
/// states; the law that produced the path is irrelevant here).
#[inline]
pub(crate) fn path_increment(bundle: &PathBundle, m: usize, k: usize, out: &mut [f64]) {
    let a = bundle.point(m, k);
    let b = bundle.point(m, k + 1);
    for c in 0..out.len() {
        out[c] = b[c] - a[c];
    }
}

/// Cumulative Itô integral ∫₀ᵗ h·dB per path at every grid time
/// (non-anticipating: h is read at the left endpoint of each step).
pub fn ito_integral(h: &Integrand, bundle: &PathBundle) -> Result<PathArray> {
    check_dims(h, bundle)?;
    let n = bundle.grid().n_steps();
    let d = bundle.dim();
    let times = bundle.grid().times().to_vec();
    let mut out = PathArray::zeros(bundle.n_paths(), n + 1, 1);
    out.rows_mut()
        .enumerate()
        .try_for_each(|(m, row)| -> Result<()> {
            let mut hvec = [0.0_f64; 2];
            let mut db = [0.0_f64; 2];
            let mut acc = 0.0;
            for k in 0..n {
                h.eval_into(times[k], bundle.point(m, k), &mut hvec[..d])?;
                path_increment(bundle, m, k, &mut db[..d]);
                let mut s = 0.0;
                for c in 0..d {
                    s += hvec[c] * db[c];
                }
                acc += s;
                row[k + 1] = acc;
            }
            Ok(())
        })?;
    Ok(out)
}

/// Realized quadratic variation ⟨B⟩_t per path: cumulative sums of the
/// increment outer products ΔB ΔBᵀ, stored row-major as d×d records.
pub fn quadratic_variation(bundle: &PathBundle) -> PathArray {
    let n = bundle.grid().n_steps();
    let d = bundle.dim();
    let mut out = PathArray::zeros(bundle.n_paths(), n + 1, d * d);
    out.rows_mut().enumerate().for_each(|(m, row)| {
        let mut acc = [0.0_f64; 4];
        let mut db = [0.0_f64; 2];
        for k in 0..n {
            path_increment(bundle, m, k, &mut db[..d]);
            for i in 0..d {
                for j in 0..d {
                    acc[i * d + j] += db[i] * db[j];
                }
            }
            row[(k + 1) * d * d..(k + 2) * d * d].copy_from_slice(&acc[..d * d]);
        }
    });
    out
}

/// The Girsanov transform of a bundle: Itô integral, density form,
/// log-density, and the drift-removed process B̂, at every grid time.
#[derive(Debug)]
pub struct GirsanovTransform<'a> {
    bundle: &'a PathBundle,
    integrand: Integrand,
    ito: PathArray,
    qv_form: PathArray,
    log_density: PathArray,
    b_hat: PathArray,
}

impl<'a> GirsanovTransform<'a> {
    pub fn bundle(&self) -> &PathBundle {
        self.bundle
    }

    pub fn integrand(&self) -> &Integrand {
        &self.integrand
    }

    pub fn n_paths(&self) -> usize {
        self.bundle.n_paths()
    }

    pub fn dim(&self) -> usize {
        self.bundle.dim()
    }

    pub fn ito(&self, m: usize, k: usize) -> f64 {
        self.ito.scalar(m, k)
    }

    pub fn qv_form(&self, m: usize, k: usize) -> f64 {
        self.qv_form.scalar(m, k)
    }

    pub fn log_density(&self, m: usize, k: usize) -> f64 {
        self.log_density.scalar(m, k)
    }

    /// D_t = exp(∫₀ᵗ h·dB − ½∫₀ᵗ h·(d⟨B⟩h)), exponentiated at use.
    pub fn density(&self, m: usize, k: usize) -> f64 {
        self.log_density.scalar(m, k).exp()
    }

    /// B̂_t = B_t − ∫₀ᵗ (d⟨B⟩ h) for path m at time index k.
    pub fn b_hat(&self, m: usize, k: usize) -> &[f64] {
        self.b_hat.at(m, k)
    }

    pub fn ito_array(&self) -> &PathArray {
        &self.ito
    }

    pub fn qv_form_array(&self) -> &PathArray {
        &self.qv_form
    }

    pub fn log_density_array(&self) -> &PathArray {
        &self.log_density
    }

    pub fn b_hat_array(&self) -> &PathArray {
        &self.b_hat
    }
}

/// Runs the transform over a whole bundle. Errors if the density leaves
/// the representable range (log D beyond ≈709.78) or the integrand
/// violates its declared bound.
pub fn girsanov_transform<'a>(
    h: &Integrand,
    bundle: &'a PathBundle,
) -> Result<GirsanovTransform<'a>> {
    check_dims(h, bundle)?;
    let n = bundle.grid().n_steps();
    let d = bundle.dim();
    let times = bundle.grid().times().to_vec();
    let m_paths = bundle.n_paths();

    let mut ito = PathArray::zeros(m_paths, n + 1, 1);
    let mut qv_form = PathArray::zeros(m_paths, n + 1, 1);
    let mut log_density = PathArray::zeros(m_paths, n + 1, 1);
    let mut b_hat = PathArray::zeros(m_paths, n + 1, d);

    ito.values
        .par_chunks_mut(n + 1)
        .zip(qv_form.values.par_chunks_mut(n + 1))
        .zip(log_density.values.par_chunks_mut(n + 1))
        .zip(b_hat.values.par_chunks_mut((n + 1) * d))
        .enumerate()
        .try_for_each(|(m, (((ito_row, qv_row), logd_row), bh_row))| -> Result<()> {
            let mut hvec = [0.0_f64; 2];
            let mut db = [0.0_f64; 2];
            // B̂ is formed as B minus the accumulated correction, so the
            // zero integrand leaves the path bit-identical.
            let mut correction = [0.0_f64; 2];
            let mut ito_acc = 0.0;
            let mut qv_acc = 0.0;
            for k in 0..n {
                h.eval_into(times[k], bundle.point(m, k), &mut hvec[..d])?;
                path_increment(bundle, m, k, &mut db[..d]);
                let mut s = 0.0;
                for c in 0..d {
                    s += hvec[c] * db[c];
                }
                ito_acc += s;
                qv_acc += s * s;
                ito_row[k + 1] = ito_acc;
                qv_row[k + 1] = qv_acc;
                let ld = ito_acc - 0.5 * qv_acc;
                // NaN must trip the guard too: a poisoned accumulator is an overflow.
                if ld.is_nan() || ld > LOG_DENSITY_LIMIT {
                    return Err(GexpError::DensityOverflow {
                        path: m,
                        step: k + 1,
                        log_density: ld,
                        ito: ito_acc,
                        qv_form: qv_acc,
                    });
                }
                logd_row[k + 1] = ld;
                let next = bundle.point(m, k + 1);
                for c in 0..d {
                    correction[c] += s * db[c];
                    bh_row[(k + 1) * d + c] = next[c] - correction[c];
                }
            }
            Ok(())
        })?;

    Ok(GirsanovTransform {
        bundle,
        integrand: h.clone(),
        ito,
        qv_form,
        log_density,
        b_hat,
    })
}
