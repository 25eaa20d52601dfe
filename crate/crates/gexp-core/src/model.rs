//! Domain types shared by all backends: volatility uncertainty sets, time
//! grids, path storage, control policies, and test-function specifications.
//!
//! The central object is the uncertainty set Θ of d×d volatility matrices.
//! It induces the sublinear generator
//!
//! ```text
//! G(A) = sup_{γ ∈ Θ} ½ tr(γγᵀ A),      A symmetric d×d,
//! ```
//!
//! which drives the nonlinear heat equation solved by [`crate::gheat`] and
//! delimits the admissible volatility controls simulated by
//! [`crate::montecarlo`]. Θ is kept in representations for which the
//! supremum is *exact*: a single matrix, a scalar interval, or a finite set
//! of matrices. Continuum multi-dimensional sets must be discretized by the
//! caller into a finite set; the engine never discretizes Θ itself, so the
//! reported numbers are exact relative to the declared model.

use std::fmt;
use std::sync::Arc;

/// Matrix type appearing in this module's public signatures, re-exported so
/// downstream crates build against the same linear-algebra version.
pub use nalgebra::DMatrix;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GexpError, Result};

/// Absolute tolerance for symmetry checks and Θ-membership comparisons.
pub const SYMMETRY_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Uncertainty set
// ---------------------------------------------------------------------------

/// The shape of the volatility uncertainty set.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaKind {
    /// A single matrix: no uncertainty, classical diffusion.
    Singleton(DMatrix<f64>),
    /// Scalar volatilities `[sigma_low, sigma_high]` in dimension 1.
    Interval1d { sigma_low: f64, sigma_high: f64 },
    /// An explicit finite collection of d×d matrices.
    FiniteSet(Vec<DMatrix<f64>>),
}

/// A bounded, closed, nonempty set Θ of d×d volatility matrices, optionally
/// carrying a nondegeneracy floor σ₀ with γγᵀ ⪰ σ₀·I for every γ ∈ Θ.
///
/// The floor is required by the Girsanov verification (a degenerate
/// volatility direction cannot absorb a drift) and is validated eagerly at
/// construction against the smallest eigenvalue of γγᵀ over the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThetaSetSpec", into = "ThetaSetSpec")]
pub struct ThetaSet {
    dim: usize,
    kind: ThetaKind,
    nondegeneracy_floor: Option<f64>,
}

impl ThetaSet {
    /// Classical single-matrix set.
    pub fn singleton(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(GexpError::InvalidInput(format!(
                "singleton volatility must be a nonempty square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        check_finite_matrix(&matrix)?;
        Ok(Self {
            dim: matrix.nrows(),
            kind: ThetaKind::Singleton(matrix),
            nondegeneracy_floor: None,
        })
    }

    /// Scalar interval `[sigma_low, sigma_high]`, dimension 1 only.
    pub fn interval1d(sigma_low: f64, sigma_high: f64) -> Result<Self> {
        if !(sigma_low.is_finite() && sigma_high.is_finite()) || sigma_low <= 0.0 {
            return Err(GexpError::InvalidInput(format!(
                "interval bounds must be finite and positive, got [{sigma_low}, {sigma_high}]"
            )));
        }
        if sigma_low > sigma_high {
            return Err(GexpError::InvalidInput(format!(
                "interval requires sigma_low <= sigma_high, got [{sigma_low}, {sigma_high}]"
            )));
        }
        Ok(Self {
            dim: 1,
            kind: ThetaKind::Interval1d {
                sigma_low,
                sigma_high,
            },
            nondegeneracy_floor: None,
        })
    }

    /// Finite set of d×d matrices; all members must share one dimension.
    pub fn finite_set(members: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| {
            GexpError::InvalidInput("uncertainty set must be nonempty".to_string())
        })?;
        let dim = first.nrows();
        if dim == 0 {
            return Err(GexpError::InvalidInput(
                "uncertainty set members must be nonempty square matrices".to_string(),
            ));
        }
        for m in &members {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(GexpError::InvalidInput(format!(
                    "all members must be {dim}x{dim}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            check_finite_matrix(m)?;
        }
        Ok(Self {
            dim,
            kind: ThetaKind::FiniteSet(members),
            nondegeneracy_floor: None,
        })
    }

    /// Attach a nondegeneracy floor σ₀ and validate γγᵀ ⪰ σ₀·I over Θ
    /// (smallest eigenvalue ≥ σ₀ − 1e-12 for every member; for the interval
    /// representation the binding member is the lower endpoint).
    pub fn with_nondegeneracy_floor(mut self, sigma0: f64) -> Result<Self> {
        if !sigma0.is_finite() || sigma0 <= 0.0 {
            return Err(GexpError::InvalidInput(format!(
                "nondegeneracy floor must be positive and finite, got {sigma0}"
            )));
        }
        let lambda_min = self.min_eigenvalue_sq();
        if lambda_min < sigma0 - SYMMETRY_TOL {
            return Err(GexpError::InvalidInput(format!(
                "nondegeneracy floor {sigma0} not satisfied: \
                 min eigenvalue of gamma*gamma^T over the set is {lambda_min}"
            )));
        }
        self.nondegeneracy_floor = Some(sigma0);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ThetaKind {
        &self.kind
    }

    pub fn nondegeneracy_floor(&self) -> Option<f64> {
        self.nondegeneracy_floor
    }

    /// Largest eigenvalue of γγᵀ over the set. This is the diffusion scale
    /// entering the CFL bound and the domain-truncation rule.
    pub fn sigma_max_sq(&self) -> f64 {
        match &self.kind {
            ThetaKind::Singleton(m) => max_eigenvalue(&gamma_gamma_t(m)),
            ThetaKind::Interval1d { sigma_high, .. } => sigma_high * sigma_high,
            ThetaKind::FiniteSet(ms) => ms
                .iter()
                .map(|m| max_eigenvalue(&gamma_gamma_t(m)))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Smallest eigenvalue of γγᵀ over the set (the tightest valid floor).
    pub fn min_eigenvalue_sq(&self) -> f64 {
        match &self.kind {
            ThetaKind::Singleton(m) => min_eigenvalue(&gamma_gamma_t(m)),
            ThetaKind::Interval1d { sigma_low, .. } => sigma_low * sigma_low,
            ThetaKind::FiniteSet(ms) => ms
                .iter()
                .map(|m| min_eigenvalue(&gamma_gamma_t(m)))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Per-coordinate maxima C_i = max_{γ∈Θ} (γγᵀ)_{ii}. The realized
    /// quadratic variation of coordinate i is bounded by C_i·T for every
    /// admissible control; this is the constant in the QV-bound check.
    pub fn max_diffusion_diag(&self) -> Vec<f64> {
        let members = self.extreme_members();
        (0..self.dim)
            .map(|i| {
                members
                    .iter()
                    .map(|m| gamma_gamma_t(m)[(i, i)])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// The finite generating members used by bang-bang control families and
    /// guide tables. For the interval this is the two endpoints (the
    /// supremum in G is always attained at an endpoint for scalar
    /// curvature); for a finite set, all members; for a singleton, itself.
    pub fn extreme_members(&self) -> Vec<DMatrix<f64>> {
        match &self.kind {
            ThetaKind::Singleton(m) => vec![m.clone()],
            ThetaKind::Interval1d {
                sigma_low,
                sigma_high,
            } => vec![
                DMatrix::from_element(1, 1, *sigma_low),
                DMatrix::from_element(1, 1, *sigma_high),
            ],
            ThetaKind::FiniteSet(ms) => ms.clone(),
        }
    }

    /// Whether `m` lies in Θ within tolerance `tol` (entrywise for matrix
    /// representations, by range for the interval).
    pub fn contains(&self, m: &DMatrix<f64>, tol: f64) -> bool {
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return false;
        }
        match &self.kind {
            ThetaKind::Singleton(g) => matrix_close(m, g, tol),
            ThetaKind::Interval1d {
                sigma_low,
                sigma_high,
            } => {
                let s = m[(0, 0)];
                s >= sigma_low - tol && s <= sigma_high + tol
            }
            ThetaKind::FiniteSet(ms) => ms.iter().any(|g| matrix_close(m, g, tol)),
        }
    }
}

fn check_finite_matrix(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(GexpError::InvalidInput(
            "volatility matrix has non-finite entries".to_string(),
        ));
    }
    Ok(())
}

fn matrix_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

/// γγᵀ for a volatility matrix γ.
pub fn gamma_gamma_t(gamma: &DMatrix<f64>) -> DMatrix<f64> {
    gamma * gamma.transpose()
}

fn max_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn check_symmetric(a: &DMatrix<f64>, dim: usize) -> Result<()> {
    if a.nrows() != dim || a.ncols() != dim {
        return Err(GexpError::InvalidInput(format!(
            "expected a {dim}x{dim} symmetric matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())).max(1.0);
    for i in 0..dim {
        for j in (i + 1)..dim {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(GexpError::InvalidInput(format!(
                    "matrix not symmetric: |A[{i},{j}] - A[{j},{i}]| = {}",
                    (a[(i, j)] - a[(j, i)]).abs()
                )));
            }
        }
    }
    Ok(())
}

/// ½ tr(γγᵀ A) for one member γ.
fn half_trace_form(gamma: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let gg = gamma_gamma_t(gamma);
    // tr(M A) = Σ_{ij} M_ij A_ji; A is symmetric so A_ji = A_ij.
    let mut tr = 0.0;
    for i in 0..gg.nrows() {
        for j in 0..gg.ncols() {
            tr += gg[(i, j)] * a[(j, i)];
        }
    }
    0.5 * tr
}

/// The sublinear generator G(A) = sup_{γ∈Θ} ½ tr(γγᵀ A).
///
/// Exact for every supported representation: singletons evaluate the single
/// trace form, finite sets take the maximum over members, and the scalar
/// interval uses the closed form ½(σ_high²·a⁺ − σ_low²·a⁻) with a = A[0,0].
///
/// # Errors
/// Rejects non-symmetric `A` (beyond a 1e-12 relative asymmetry tolerance)
/// and dimension mismatches.
pub fn g_function(theta: &ThetaSet, a: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(a, theta.dim)?;
    Ok(match &theta.kind {
        ThetaKind::Singleton(g) => half_trace_form(g, a),
        ThetaKind::Interval1d {
            sigma_low,
            sigma_high,
        } => {
            let x = a[(0, 0)];
            0.5 * (sigma_high * sigma_high * x.max(0.0) - sigma_low * sigma_low * (-x).max(0.0))
        }
        ThetaKind::FiniteSet(ms) => ms
            .iter()
            .map(|g| half_trace_form(g, a))
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

/// A maximizer of the trace form: some γ ∈ Θ with ½ tr(γγᵀA) = G(A).
///
/// The supremum does not single out a maximizer, so ties are broken by a
/// fixed, documented rule: finite sets return the lowest-index member
/// attaining the maximum; the interval returns `sigma_high` when
/// A\[0,0\] = 0 (zero curvature, both endpoints attain 0).
pub fn argmax_gamma(theta: &ThetaSet, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(a, theta.dim)?;
    Ok(match &theta.kind {
        ThetaKind::Singleton(g) => g.clone(),
        ThetaKind::Interval1d {
            sigma_low,
            sigma_high,
        } => {
            let s = if a[(0, 0)] >= 0.0 {
                *sigma_high
            } else {
                *sigma_low
            };
            DMatrix::from_element(1, 1, s)
        }
        ThetaKind::FiniteSet(ms) => {
            let mut best = 0;
            let mut best_val = half_trace_form(&ms[0], a);
            for (i, g) in ms.iter().enumerate().skip(1) {
                let v = half_trace_form(g, a);
                // Strict comparison keeps the lowest index on ties.
                if v > best_val {
                    best = i;
                    best_val = v;
                }
            }
            ms[best].clone()
        }
    })
}

// --- serde bridge ----------------------------------------------------------

/// JSON shape of a [`ThetaSet`]; matrices are row-major nested arrays.
///
/// `nondegeneracy_floor` is stated in γγ* units: it asserts that every
/// eigenvalue of γγ* over the set is at least this value (so for the
/// one-dimensional interval [σ_low, σ_high] the largest valid floor is
/// σ_low²).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaSetSpec {
    Singleton {
        matrix: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nondegeneracy_floor: Option<f64>,
    },
    Interval1d {
        sigma_low: f64,
        sigma_high: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nondegeneracy_floor: Option<f64>,
    },
    FiniteSet {
        members: Vec<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nondegeneracy_floor: Option<f64>,
    },
}

/// Row-major nested arrays → matrix, with a squareness check.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(GexpError::InvalidInput(
            "matrix must be square and nonempty (row-major nested arrays)".to_string(),
        ));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl TryFrom<ThetaSetSpec> for ThetaSet {
    type Error = GexpError;

    fn try_from(spec: ThetaSetSpec) -> Result<Self> {
        let (set, floor) = match spec {
            ThetaSetSpec::Singleton {
                matrix,
                nondegeneracy_floor,
            } => (
                ThetaSet::singleton(matrix_from_rows(&matrix)?)?,
                nondegeneracy_floor,
            ),
            ThetaSetSpec::Interval1d {
                sigma_low,
                sigma_high,
                nondegeneracy_floor,
            } => (
                ThetaSet::interval1d(sigma_low, sigma_high)?,
                nondegeneracy_floor,
            ),
            ThetaSetSpec::FiniteSet {
                members,
                nondegeneracy_floor,
            } => {
                let ms = members
                    .iter()
                    .map(|rows| matrix_from_rows(rows))
                    .collect::<Result<Vec<_>>>()?;
                (ThetaSet::finite_set(ms)?, nondegeneracy_floor)
            }
        };
        match floor {
            Some(f) => set.with_nondegeneracy_floor(f),
            None => Ok(set),
        }
    }
}

impl From<ThetaSet> for ThetaSetSpec {
    fn from(t: ThetaSet) -> Self {
        let floor = t.nondegeneracy_floor;
        match t.kind {
            ThetaKind::Singleton(m) => ThetaSetSpec::Singleton {
                matrix: rows_from_matrix(&m),
                nondegeneracy_floor: floor,
            },
            ThetaKind::Interval1d {
                sigma_low,
                sigma_high,
            } => ThetaSetSpec::Interval1d {
                sigma_low,
                sigma_high,
                nondegeneracy_floor: floor,
            },
            ThetaKind::FiniteSet(ms) => ThetaSetSpec::FiniteSet {
                members: ms.iter().map(rows_from_matrix).collect(),
                nondegeneracy_floor: floor,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// Uniform partition 0 = t_0 < t_1 < … < t_N = T.
///
/// Times are computed as T·k/N so that t_N equals T exactly in floating
/// point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TimeGridSpec", into = "TimeGridSpec")]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
    times: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimeGridSpec {
    horizon: f64,
    n_steps: usize,
}

impl TryFrom<TimeGridSpec> for TimeGrid {
    type Error = GexpError;
    fn try_from(s: TimeGridSpec) -> Result<Self> {
        TimeGrid::uniform(s.horizon, s.n_steps)
    }
}

impl From<TimeGrid> for TimeGridSpec {
    fn from(g: TimeGrid) -> Self {
        TimeGridSpec {
            horizon: g.horizon,
            n_steps: g.n_steps,
        }
    }
}

impl TimeGrid {
    /// Uniform grid with `n_steps` steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(GexpError::InvalidInput(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(GexpError::InvalidInput(
                "time grid needs at least one step".to_string(),
            ));
        }
        let times = (0..=n_steps)
            .map(|k| horizon * k as f64 / n_steps as f64)
            .collect();
        Ok(Self {
            horizon,
            n_steps,
            times,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Snap `t` to the nearest grid index; errors when the distance exceeds
    /// half a step (functional evaluation times must sit on the grid).
    pub fn snap(&self, t: f64) -> Result<usize> {
        let dt = self.dt();
        let k = (t / dt).round();
        if !(0.0..=self.n_steps as f64).contains(&k) {
            return Err(GexpError::InvalidInput(format!(
                "time {t} outside the grid [0, {}]",
                self.horizon
            )));
        }
        let k = k as usize;
        if (t - self.times[k]).abs() > dt / 2.0 + 1e-12 * self.horizon {
            return Err(GexpError::InvalidInput(format!(
                "time {t} is more than half a step away from the grid (dt = {dt})"
            )));
        }
        Ok(k)
    }
}

// ---------------------------------------------------------------------------
// Path storage and seeding
// ---------------------------------------------------------------------------

/// RNG for one path: a ChaCha stream keyed by `(seed, path_index)`.
///
/// Every path owns an independent stream, so simulation results are a pure
/// function of `(seed, grid, control)` and independent of how paths are
/// partitioned across workers.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index.wrapping_add(1));
    rng
}

/// Fills `out` with independent N(0, dt) increments (dt = `sqrt_dt`²).
pub fn fill_gaussian_increments(rng: &mut ChaCha8Rng, sqrt_dt: f64, out: &mut [f64]) {
    for x in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x = z * sqrt_dt;
    }
}

/// A seeded batch of driving increments and the induced controlled paths on
/// a uniform grid. Storage is flat and row-major: `dw` is [M × N × d] and
/// `b` is [M × (N+1) × d] with `b[m, 0, ·] = 0`.
#[derive(Debug, Clone)]
pub struct PathBundle {
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    seed: u64,
    dw: Vec<f64>,
    b: Vec<f64>,
}

impl PathBundle {
    pub(crate) fn from_parts(
        grid: TimeGrid,
        dim: usize,
        n_paths: usize,
        seed: u64,
        dw: Vec<f64>,
        b: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(dw.len(), n_paths * grid.n_steps() * dim);
        debug_assert_eq!(b.len(), n_paths * (grid.n_steps() + 1) * dim);
        Self {
            grid,
            dim,
            n_paths,
            seed,
            dw,
            b,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Driving increment ΔW_k of path `m` (length-d slice).
    pub fn dw(&self, m: usize, k: usize) -> &[f64] {
        let n = self.grid.n_steps();
        let start = (m * n + k) * self.dim;
        &self.dw[start..start + self.dim]
    }

    /// Controlled path value B_{t_k} of path `m` (length-d slice).
    pub fn point(&self, m: usize, k: usize) -> &[f64] {
        let n1 = self.grid.n_steps() + 1;
        let start = (m * n1 + k) * self.dim;
        &self.b[start..start + self.dim]
    }

    /// Whole path of `m`: (N+1)·d values, time-major.
    pub fn path(&self, m: usize) -> &[f64] {
        let n1 = self.grid.n_steps() + 1;
        &self.b[m * n1 * self.dim..(m + 1) * n1 * self.dim]
    }
}

// ---------------------------------------------------------------------------
// Control policies
// ---------------------------------------------------------------------------

/// Signature of a state-feedback control rule: (step index, current state)
/// to a member of Θ.
pub type FeedbackRule = dyn Fn(usize, &[f64]) -> DMatrix<f64> + Send + Sync;

/// A Θ-valued, piecewise-constant volatility policy: the matrix used on
/// `(t_k, t_{k+1}]` is chosen at `t_k` from information available then.
///
/// Adaptedness is structural: [`ControlPolicy::emit`] receives only the step
/// index and the current state of the controlled process, never future
/// increments.
#[derive(Clone)]
pub enum ControlPolicy {
    /// Fixed schedule of one matrix per step.
    Deterministic {
        schedule: Arc<Vec<DMatrix<f64>>>,
        label: String,
    },
    /// State feedback: a rule mapping (step index, current state) to a
    /// member of Θ. Which process supplies the state (the controlled path
    /// itself or its drift-removed transform) is the simulation context's
    /// choice; both are known at t_k.
    Feedback {
        rule: Arc<FeedbackRule>,
        label: String,
    },
    /// Feedback through a precomputed table of maximizing members of Θ,
    /// built from a solved value function (see [`crate::gheat::GuideTable`]).
    PdeGuided {
        guide: Arc<crate::gheat::GuideTable>,
        label: String,
    },
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlPolicy")
            .field("label", &self.label())
            .finish()
    }
}

impl ControlPolicy {
    /// Fixed schedule; validates every matrix against Θ.
    pub fn deterministic(
        theta: &ThetaSet,
        schedule: Vec<DMatrix<f64>>,
        label: impl Into<String>,
    ) -> Result<Self> {
        for (k, m) in schedule.iter().enumerate() {
            if !theta.contains(m, SYMMETRY_TOL) {
                return Err(GexpError::InvalidInput(format!(
                    "schedule step {k} emits a matrix outside the uncertainty set"
                )));
            }
        }
        Ok(ControlPolicy::Deterministic {
            schedule: Arc::new(schedule),
            label: label.into(),
        })
    }

    /// Constant policy γ_t ≡ m.
    pub fn constant(
        theta: &ThetaSet,
        m: DMatrix<f64>,
        n_steps: usize,
        label: impl Into<String>,
    ) -> Result<Self> {
        Self::deterministic(theta, vec![m; n_steps], label)
    }

    /// State-feedback policy from a rule closure.
    pub fn feedback(
        rule: impl Fn(usize, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        label: impl Into<String>,
    ) -> Self {
        ControlPolicy::Feedback {
            rule: Arc::new(rule),
            label: label.into(),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            ControlPolicy::Deterministic { label, .. } => label,
            ControlPolicy::Feedback { label, .. } => label,
            ControlPolicy::PdeGuided { label, .. } => label,
        }
    }

    /// Writes the matrix used on `(t_k, t_{k+1}]` into `out` (d×d,
    /// preallocated by the caller so the hot simulation loop does not
    /// allocate).
    pub fn emit(&self, k: usize, state: &[f64], out: &mut DMatrix<f64>) {
        match self {
            ControlPolicy::Deterministic { schedule, .. } => out.copy_from(&schedule[k]),
            ControlPolicy::Feedback { rule, .. } => out.copy_from(&rule(k, state)),
            ControlPolicy::PdeGuided { guide, .. } => out.copy_from(guide.member(k, state)),
        }
    }
}

// ---------------------------------------------------------------------------
// Cylinder functionals (test functions)
// ---------------------------------------------------------------------------

/// Named scalar payoffs on a single d-dimensional state. These form the
/// whole test-function vocabulary of the engine; keeping the list closed
/// keeps every declared Lipschitz constant honest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarPayoff {
    /// x_c (linear in one coordinate).
    Identity {
        #[serde(default)]
        coord: usize,
    },
    /// |x|² (convex).
    Square,
    /// −|x|² (concave).
    NegSquare,
    /// |x_c| (convex, kinked).
    Abs {
        #[serde(default)]
        coord: usize,
    },
    /// max(x_c − K, 0) (convex, kinked, asymmetric for K ≠ 0).
    Call {
        #[serde(default)]
        coord: usize,
        strike: f64,
    },
    /// max(K − x_c, 0).
    Put {
        #[serde(default)]
        coord: usize,
        strike: f64,
    },
    /// max(x_c − K_low, 0) − max(x_c − K_high, 0): bounded, mixed convexity.
    CallSpread {
        #[serde(default)]
        coord: usize,
        strike_low: f64,
        strike_high: f64,
    },
    /// Cubic smoothstep from 0 to 1 across [center − halfwidth,
    /// center + halfwidth]: a smooth bounded indicator with mixed convexity.
    SmoothIndicator {
        #[serde(default)]
        coord: usize,
        center: f64,
        halfwidth: f64,
    },
    /// max(x_c, 0) − w·max(−x_c, 0): kinked with unequal slopes, mixed
    /// convexity for w ∈ (0, 1).
    TiltedCall {
        #[serde(default)]
        coord: usize,
        down_weight: f64,
    },
}

impl fmt::Display for ScalarPayoff {
    /// Compact label used in reports and CSV columns.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarPayoff::Identity { coord } => write!(f, "identity[{coord}]"),
            ScalarPayoff::Square => write!(f, "square"),
            ScalarPayoff::NegSquare => write!(f, "neg_square"),
            ScalarPayoff::Abs { coord } => write!(f, "abs[{coord}]"),
            ScalarPayoff::Call { coord, strike } => write!(f, "call[{coord}](K={strike})"),
            ScalarPayoff::Put { coord, strike } => write!(f, "put[{coord}](K={strike})"),
            ScalarPayoff::CallSpread {
                coord,
                strike_low,
                strike_high,
            } => write!(f, "call_spread[{coord}]({strike_low}..{strike_high})"),
            ScalarPayoff::SmoothIndicator {
                coord,
                center,
                halfwidth,
            } => write!(f, "smooth_indicator[{coord}]({center}±{halfwidth})"),
            ScalarPayoff::TiltedCall { coord, down_weight } => {
                write!(f, "tilted_call[{coord}](w={down_weight})")
            }
        }
    }
}

impl ScalarPayoff {
    /// Evaluate on a d-dimensional state.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarPayoff::Identity { coord } => x[*coord],
            ScalarPayoff::Square => x.iter().map(|v| v * v).sum(),
            ScalarPayoff::NegSquare => -x.iter().map(|v| v * v).sum::<f64>(),
            ScalarPayoff::Abs { coord } => x[*coord].abs(),
            ScalarPayoff::Call { coord, strike } => (x[*coord] - strike).max(0.0),
            ScalarPayoff::Put { coord, strike } => (strike - x[*coord]).max(0.0),
            ScalarPayoff::CallSpread {
                coord,
                strike_low,
                strike_high,
            } => (x[*coord] - strike_low).max(0.0) - (x[*coord] - strike_high).max(0.0),
            ScalarPayoff::SmoothIndicator {
                coord,
                center,
                halfwidth,
            } => {
                let u = ((x[*coord] - center + halfwidth) / (2.0 * halfwidth)).clamp(0.0, 1.0);
                u * u * (3.0 - 2.0 * u)
            }
            ScalarPayoff::TiltedCall { coord, down_weight } => {
                x[*coord].max(0.0) - down_weight * (-x[*coord]).max(0.0)
            }
        }
    }

    /// Lipschitz constant (Euclidean) valid on the ball |x| ≤ radius.
    /// Unbounded payoffs (identity, square, product) are Lipschitz and
    /// bounded only relative to the engine's truncated domain; the radius
    /// records that truncation.
    pub fn lipschitz(&self, radius: f64) -> f64 {
        match self {
            ScalarPayoff::Identity { .. } | ScalarPayoff::Abs { .. } => 1.0,
            ScalarPayoff::Square | ScalarPayoff::NegSquare => 2.0 * radius,
            ScalarPayoff::Call { .. } | ScalarPayoff::Put { .. } => 1.0,
            ScalarPayoff::CallSpread { .. } => 1.0,
            ScalarPayoff::SmoothIndicator { halfwidth, .. } => 0.75 / halfwidth,
            ScalarPayoff::TiltedCall { down_weight, .. } => down_weight.abs().max(1.0),
        }
    }

    /// Sup-norm bound on the ball |x| ≤ radius.
    pub fn bound(&self, radius: f64) -> f64 {
        match self {
            ScalarPayoff::Identity { .. } | ScalarPayoff::Abs { .. } => radius,
            ScalarPayoff::Square | ScalarPayoff::NegSquare => radius * radius,
            ScalarPayoff::Call { strike, .. } | ScalarPayoff::Put { strike, .. } => {
                radius + strike.abs()
            }
            ScalarPayoff::CallSpread {
                strike_low,
                strike_high,
                ..
            } => (strike_high - strike_low).abs(),
            ScalarPayoff::SmoothIndicator { .. } => 1.0,
            ScalarPayoff::TiltedCall { down_weight, .. } => radius * down_weight.abs().max(1.0),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let coord = match self {
            ScalarPayoff::Identity { coord }
            | ScalarPayoff::Abs { coord }
            | ScalarPayoff::Call { coord, .. }
            | ScalarPayoff::Put { coord, .. }
            | ScalarPayoff::CallSpread { coord, .. }
            | ScalarPayoff::SmoothIndicator { coord, .. }
            | ScalarPayoff::TiltedCall { coord, .. } => *coord,
            ScalarPayoff::Square | ScalarPayoff::NegSquare => 0,
        };
        if coord >= dim {
            return Err(GexpError::InvalidInput(format!(
                "payoff coordinate {coord} out of range for dimension {dim}"
            )));
        }
        if let ScalarPayoff::CallSpread {
            strike_low,
            strike_high,
            ..
        } = self
        {
            if strike_low >= strike_high {
                return Err(GexpError::InvalidInput(
                    "call spread requires strike_low < strike_high".to_string(),
                ));
            }
        }
        if let ScalarPayoff::SmoothIndicator { halfwidth, .. } = self {
            if *halfwidth <= 0.0 {
                return Err(GexpError::InvalidInput(
                    "smooth indicator requires a positive halfwidth".to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// How a scalar payoff is lifted to a functional of several time points.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinFunctional {
    /// φ(x₁) — one evaluation time.
    Single(ScalarPayoff),
    /// φ(x₂ − x₁) — a functional of the increment between two times.
    Increment(ScalarPayoff),
    /// x₁,c · x₂,c — the product of one coordinate at two times.
    Product { coord: usize },
}

impl BuiltinFunctional {
    fn arity(&self) -> usize {
        match self {
            BuiltinFunctional::Single(_) => 1,
            BuiltinFunctional::Increment(_) | BuiltinFunctional::Product { .. } => 2,
        }
    }

    fn eval(&self, args: &[f64], dim: usize) -> f64 {
        match self {
            BuiltinFunctional::Single(p) => p.eval(&args[..dim]),
            BuiltinFunctional::Increment(p) => {
                let mut inc = [0.0_f64; 4];
                for i in 0..dim {
                    inc[i] = args[dim + i] - args[i];
                }
                p.eval(&inc[..dim])
            }
            BuiltinFunctional::Product { coord } => args[*coord] * args[dim + *coord],
        }
    }
}

/// Signature of a custom payoff closure over the sampled coordinates.
pub type PayoffFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// The payoff map of a cylinder functional.
#[derive(Clone)]
pub enum Payoff {
    Builtin(BuiltinFunctional),
    /// Grid-backed functional produced by conditional reduction.
    Lattice(Arc<crate::expectation::LatticeFunctional>),
    /// Arbitrary closure; used by tests and internal compositions.
    Custom(Arc<PayoffFn>),
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Builtin(b) => write!(f, "Builtin({b:?})"),
            Payoff::Lattice(_) => write!(f, "Lattice(..)"),
            Payoff::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A bounded Lipschitz map φ of the process at finitely many times,
/// `φ(B_{t₁}, …, B_{t_k})`, with declared Lipschitz constant and bound.
///
/// Arguments are passed flattened and time-major: k·d values, the d
/// coordinates of B_{t₁} first.
#[derive(Debug, Clone)]
pub struct CylinderFunctional {
    times: Vec<f64>,
    dim: usize,
    payoff: Payoff,
    lipschitz: f64,
    bound: f64,
    label: String,
}

impl CylinderFunctional {
    /// Builds a functional from the builtin vocabulary. `radius` is the
    /// state-space radius relative to which the Lipschitz constant and
    /// bound of growing payoffs are declared (the PDE backend's truncated
    /// box; see [`crate::gheat`]).
    pub fn builtin(
        dim: usize,
        times: Vec<f64>,
        functional: BuiltinFunctional,
        radius: f64,
    ) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(GexpError::InvalidInput(format!(
                "supported dimensions are 1 and 2, got {dim}"
            )));
        }
        check_times(&times)?;
        if times.len() != functional.arity() {
            return Err(GexpError::InvalidInput(format!(
                "functional arity {} does not match {} evaluation times",
                functional.arity(),
                times.len()
            )));
        }
        let (lip, bound, label) = match &functional {
            BuiltinFunctional::Single(p) => {
                p.validate(dim)?;
                let r = radius * (dim as f64).sqrt();
                (p.lipschitz(r), p.bound(r), p.to_string())
            }
            BuiltinFunctional::Increment(p) => {
                p.validate(dim)?;
                // As a function of (x, y) the increment map doubles the
                // squared gradient: |φ(y−x) − φ(y'−x')| ≤ C(|Δx| + |Δy|)
                // ≤ C√2·|(Δx, Δy)|₂. The reachable increment radius is 2r.
                let r = 2.0 * radius * (dim as f64).sqrt();
                (
                    p.lipschitz(r) * std::f64::consts::SQRT_2,
                    p.bound(r),
                    format!("increment {p}"),
                )
            }
            BuiltinFunctional::Product { coord } => {
                if *coord >= dim {
                    return Err(GexpError::InvalidInput(format!(
                        "product coordinate {coord} out of range for dimension {dim}"
                    )));
                }
                let r = radius;
                (r * std::f64::consts::SQRT_2, r * r, format!("product[{coord}]"))
            }
        };
        Ok(Self {
            times,
            dim,
            payoff: Payoff::Builtin(functional),
            lipschitz: lip,
            bound,
            label,
        })
    }

    /// Wraps an arbitrary closure with caller-declared constants.
    pub fn custom(
        dim: usize,
        times: Vec<f64>,
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        lipschitz: f64,
        bound: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        check_times(&times)?;
        Ok(Self {
            times,
            dim,
            payoff: Payoff::Custom(Arc::new(phi)),
            lipschitz,
            bound,
            label: label.into(),
        })
    }

    /// Wraps a grid-backed functional produced by conditional reduction.
    pub fn from_lattice(
        times: Vec<f64>,
        dim: usize,
        lattice: Arc<crate::expectation::LatticeFunctional>,
        lipschitz: f64,
        bound: f64,
        label: impl Into<String>,
    ) -> Result<Self> {
        check_times(&times)?;
        Ok(Self {
            times,
            dim,
            payoff: Payoff::Lattice(lattice),
            lipschitz,
            bound,
            label: label.into(),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn k(&self) -> usize {
        self.times.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn payoff(&self) -> &Payoff {
        &self.payoff
    }

    /// For the builtin two-time increment form φ(x, y) = p(y − x), the
    /// inner payoff p. The backward recursion uses this to evaluate stage
    /// data directly in increment coordinates — algebraically identical,
    /// but free of the (a + Δ) − a roundoff that would otherwise break the
    /// exact anchor-independence of the stage.
    pub(crate) fn increment_payoff(&self) -> Option<&ScalarPayoff> {
        match &self.payoff {
            Payoff::Builtin(BuiltinFunctional::Increment(p)) if self.k() == 2 => Some(p),
            _ => None,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Evaluate at flattened, time-major arguments (k·d values).
    pub fn eval(&self, args: &[f64]) -> f64 {
        debug_assert_eq!(args.len(), self.times.len() * self.dim);
        match &self.payoff {
            Payoff::Builtin(b) => b.eval(args, self.dim),
            Payoff::Lattice(l) => l.eval(args),
            Payoff::Custom(f) => f(args),
        }
    }

    /// Pointwise sum f + g (same times, same dimension).
    pub fn sum(f: &Self, g: &Self) -> Result<Self> {
        if f.times != g.times || f.dim != g.dim {
            return Err(GexpError::InvalidInput(
                "functional sum requires identical times and dimension".to_string(),
            ));
        }
        let (fc, gc) = (f.clone(), g.clone());
        Self::custom(
            f.dim,
            f.times.clone(),
            move |args| fc.eval(args) + gc.eval(args),
            f.lipschitz + g.lipschitz,
            f.bound + g.bound,
            format!("({}) + ({})", f.label, g.label),
        )
    }

    /// Pointwise scaling λ·f (λ may be negative; sublinearity tests use
    /// λ ≥ 0).
    pub fn scale(f: &Self, lambda: f64) -> Result<Self> {
        let fc = f.clone();
        Self::custom(
            f.dim,
            f.times.clone(),
            move |args| lambda * fc.eval(args),
            lambda.abs() * f.lipschitz,
            lambda.abs() * f.bound,
            format!("{lambda} * ({})", f.label),
        )
    }

    /// Spot-checks the declared Lipschitz constant on random argument pairs
    /// drawn from the cube |x_i| ≤ radius.
    pub fn spot_check_lipschitz(&self, radius: f64, pairs: usize, seed: u64) -> Result<()> {
        let mut rng = path_rng(seed, 0);
        let n = self.times.len() * self.dim;
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        for _ in 0..pairs {
            for i in 0..n {
                x[i] = rng.random_range(-radius..radius);
                y[i] = rng.random_range(-radius..radius);
            }
            let dist = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let df = (self.eval(&x) - self.eval(&y)).abs();
            if df > self.lipschitz * dist * (1.0 + 1e-9) + 1e-12 {
                return Err(GexpError::InvalidInput(format!(
                    "functional '{}' violates its declared Lipschitz constant {}: \
                     |Δφ| = {df} over distance {dist}",
                    self.label, self.lipschitz
                )));
            }
        }
        Ok(())
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(GexpError::InvalidInput(
            "a cylinder functional needs at least one evaluation time".to_string(),
        ));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(GexpError::InvalidInput(
            "evaluation times must be finite and nonnegative".to_string(),
        ));
    }
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GexpError::InvalidInput(
            "evaluation times must be strictly increasing".to_string(),
        ));
    }
    Ok(())
}
