//! Backward recursion for multi-time G-expectations.
//!
//! A cylinder functional φ(B_{t₁}, …, B_{t_k}) is evaluated by peeling off
//! the last time: with the increments independent of the past and
//! stationary, the inner expectation over B_{t_k} given the earlier values
//! (x₁, …, x_{k−1}) is
//!
//! ```text
//! φ₁(x₁, …, x_{k−1}) = E[ φ(x₁, …, x_{k−1}, x_{k−1} + Δ) ],   Δ ~ B_{t_k − t_{k−1}}
//! ```
//!
//! i.e. one nonlinear-heat solve over the horizon t_k − t_{k−1} with the
//! increment Δ as the spatial variable, read at Δ = 0. Repeating down to a
//! single time and solving once more over t₁ gives the number E[φ].
//!
//! The frozen arguments (x₁, …, x_{j−1}) of each stage live on an anchor
//! lattice over the same truncated box as the PDE grid; the reduced
//! functional is the multilinear interpolation of the per-anchor values.
//! Two measures keep that honest:
//!
//! * stage data that coincides across anchors (bitwise, detected by
//!   content hash) is solved once — functionals of the increment alone
//!   collapse an entire stage to a single solve;
//! * after each stage, the interpolant is compared against freshly solved
//!   values at off-lattice probe points, and a residual above tolerance is
//!   reported as an accuracy warning in the diagnostics.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{GexpError, Result};
use crate::gheat::{evaluate_at, solve_gheat_from_data, sample_on_grid, SolverParams, SpatialGrid};
use crate::model::{CylinderFunctional, ScalarPayoff, ThetaSet};

/// Largest number of evaluation times the recursion accepts.
pub const MAX_TIMES: usize = 4;
/// Largest product (number of times) × (spatial dimension): the anchor
/// tensor grows exponentially in it.
pub const MAX_TIME_SPACE_PRODUCT: usize = 6;

/// Seed for the (deterministic) probe-point sampler.
const PROBE_SEED: u64 = 0x600D_5EED;

// ---------------------------------------------------------------------------
// Lattice-backed functionals
// ---------------------------------------------------------------------------

/// One axis of a value lattice: `n` uniform nodes on [−half_width,
/// half_width].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeAxis {
    pub n: usize,
    pub half_width: f64,
}

impl LatticeAxis {
    fn coord(&self, ix: usize) -> f64 {
        let n1 = (self.n - 1) as f64;
        self.half_width * (2.0 * ix as f64 - n1) / n1
    }

    fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n - 1) as f64
    }
}

/// A function of several real arguments stored as values on a tensor
/// lattice and evaluated by multilinear interpolation.
///
/// Outside the lattice box the interpolation formula is applied with the
/// outermost cell's coefficients, which extends the function linearly per
/// axis — the right continuation for value functions that are affine in
/// the far field.
pub struct LatticeFunctional {
    axes: Vec<LatticeAxis>,
    strides: Vec<usize>,
    values: Vec<f64>,
    label: String,
}

impl std::fmt::Debug for LatticeFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatticeFunctional")
            .field("axes", &self.axes)
            .field("label", &self.label)
            .finish_non_exhaustive()
    }
}

impl LatticeFunctional {
    pub fn new(axes: Vec<LatticeAxis>, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_TIME_SPACE_PRODUCT {
            return Err(GexpError::InvalidInput(format!(
                "lattice functionals take 1..={MAX_TIME_SPACE_PRODUCT} axes, got {}",
                axes.len()
            )));
        }
        if axes
            .iter()
            .any(|a| a.n < 2 || a.half_width.is_nan() || a.half_width <= 0.0)
        {
            return Err(GexpError::InvalidInput(
                "every lattice axis needs at least 2 nodes and a positive half-width".to_string(),
            ));
        }
        let total: usize = axes.iter().map(|a| a.n).product();
        if values.len() != total {
            return Err(GexpError::InvalidInput(format!(
                "lattice needs {total} values, got {}",
                values.len()
            )));
        }
        let mut strides = vec![1usize; axes.len()];
        for i in (0..axes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].n;
        }
        Ok(Self {
            axes,
            strides,
            values,
            label: label.into(),
        })
    }

    pub fn axes(&self) -> &[LatticeAxis] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Multilinear interpolation (linear extrapolation outside the box).
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.axes.len());
        let mut base = [0usize; MAX_TIME_SPACE_PRODUCT];
        let mut frac = [0.0f64; MAX_TIME_SPACE_PRODUCT];
        for (a, (axis, &xi)) in self.axes.iter().zip(x).enumerate() {
            let t = (xi + axis.half_width) / axis.spacing();
            let i = (t.floor().max(0.0) as usize).min(axis.n - 2);
            base[a] = i;
            frac[a] = t - i as f64; // may leave [0, 1]: extrapolation
        }
        let k = self.axes.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..k {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx += (base[a] + 1) * self.strides[a];
                } else {
                    w *= 1.0 - frac[a];
                    idx += base[a] * self.strides[a];
                }
            }
            acc += w * self.values[idx];
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Plans and diagnostics
// ---------------------------------------------------------------------------

/// Numerical resolution of the backward recursion: one truncated box and
/// spatial grid shared by every stage (sized from the uncertainty set and
/// the final evaluation time), anchor lattices for the frozen arguments,
/// and the CFL-derived time step.
#[derive(Debug, Clone)]
pub struct BackwardRecursionPlan {
    /// PDE nodes per axis (odd).
    pub n_nodes: usize,
    /// Box half-width; `None` derives 6·σ_max·√t_k.
    pub half_width: Option<f64>,
    /// Fraction of the CFL bound used as the time step.
    pub cfl_safety: f64,
    /// Anchor nodes per frozen axis; `None` picks by depth (full grid for
    /// one frozen scalar argument, coarser for deeper tensors).
    pub anchor_nodes: Option<usize>,
    /// Interpolation residual at probe points above this raises an
    /// accuracy warning in the diagnostics.
    pub probe_tolerance: f64,
}

impl BackwardRecursionPlan {
    pub fn default_for_dim(dim: usize) -> Self {
        BackwardRecursionPlan {
            n_nodes: if dim == 1 { 601 } else { 241 },
            half_width: None,
            cfl_safety: 0.9,
            anchor_nodes: None,
            probe_tolerance: 5e-3,
        }
    }

    pub(crate) fn solver_params(&self) -> SolverParams {
        SolverParams {
            n_nodes: self.n_nodes,
            half_width: self.half_width,
            cfl_safety: self.cfl_safety,
        }
    }

    /// Anchor nodes per axis for a stage with `anchor_axes` frozen scalar
    /// axes on a grid with `n_nodes` per axis.
    fn anchor_count(&self, anchor_axes: usize, n_nodes: usize) -> usize {
        match self.anchor_nodes {
            Some(a) => a,
            None => match anchor_axes {
                1 => n_nodes, // frozen axis at full grid resolution
                2 => 31,
                3 => 15,
                _ => 9,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(a) = self.anchor_nodes {
            if a < 3 || a % 2 == 0 {
                return Err(GexpError::Config(format!(
                    "anchor nodes per axis must be an odd integer >= 3, got {a}"
                )));
            }
        }
        if self.probe_tolerance.is_nan() || self.probe_tolerance <= 0.0 {
            return Err(GexpError::Config(format!(
                "probe tolerance must be positive, got {}",
                self.probe_tolerance
            )));
        }
        Ok(())
    }
}

/// What the recursion actually did: how many PDE solves the caching left,
/// how well the anchor interpolation held up at probe points.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct RecursionDiagnostics {
    /// Reduction stages run, counting the final single-time solve.
    pub stages: usize,
    /// Distinct PDE solves (cache misses), probes included.
    pub pde_solves: usize,
    /// Anchor evaluations answered from the stage cache.
    pub cache_hits: usize,
    /// Largest |interpolated − solved| seen at probe points.
    pub max_probe_residual: f64,
    /// Set when the residual exceeded the plan's tolerance.
    pub accuracy_warning: Option<String>,
    /// Resolved grid geometry.
    pub n_nodes: usize,
    pub half_width: f64,
}

/// Value of a G-expectation together with the recursion diagnostics.
#[derive(Debug, Clone)]
pub struct GExpectation {
    pub value: f64,
    pub diagnostics: RecursionDiagnostics,
}

/// Result of a conditional reduction at time t.
#[derive(Debug)]
pub enum ConditionalReduction {
    /// Every evaluation time is frozen (t ≥ t_k): the functional itself.
    Identity,
    /// Reduced all the way to B_0 = 0: a constant, equal to the plain
    /// G-expectation.
    Constant(f64),
    /// A functional of (B_{t₁}, …, B_{t_i}, B_t), lattice-backed.
    Reduced(CylinderFunctional),
}

#[derive(Debug)]
pub struct ConditionalGExpectation {
    pub reduction: ConditionalReduction,
    pub diagnostics: RecursionDiagnostics,
}

// ---------------------------------------------------------------------------
// The recursion
// ---------------------------------------------------------------------------

/// The functional currently being reduced: the user's φ for the first
/// stage, lattice interpolants afterwards.
enum Current<'a> {
    Original(&'a CylinderFunctional),
    Lattice(LatticeFunctional),
}

/// One reduction stage's inputs: the functional being reduced, the payoff
/// override for increment-form functionals (last stage only), the number of
/// time arguments that survive the stage, and the increment horizon.
struct StageInput<'a> {
    current: &'a Current<'a>,
    increment: Option<&'a ScalarPayoff>,
    depth: usize,
    tau: f64,
}

impl Current<'_> {
    fn eval(&self, args: &[f64]) -> f64 {
        match self {
            Current::Original(f) => f.eval(args),
            Current::Lattice(l) => l.eval(args),
        }
    }
}

fn validate_inputs(theta: &ThetaSet, f: &CylinderFunctional, plan: &BackwardRecursionPlan) -> Result<()> {
    plan.validate()?;
    if f.dim() != theta.dim() {
        return Err(GexpError::InvalidInput(format!(
            "functional dimension {} does not match uncertainty set dimension {}",
            f.dim(),
            theta.dim()
        )));
    }
    if f.times()[0] <= 0.0 {
        return Err(GexpError::InvalidInput(
            "the first evaluation time must be positive (a time-0 argument is a constant)"
                .to_string(),
        ));
    }
    if f.k() > MAX_TIMES {
        return Err(GexpError::InvalidInput(format!(
            "at most {MAX_TIMES} evaluation times are supported, got {}",
            f.k()
        )));
    }
    if f.k() * f.dim() > MAX_TIME_SPACE_PRODUCT {
        return Err(GexpError::InvalidInput(format!(
            "times x dimension = {} exceeds the cap {MAX_TIME_SPACE_PRODUCT}",
            f.k() * f.dim()
        )));
    }
    Ok(())
}

/// Shared per-run state: grid, step, solve cache keyed by the content hash
/// of the initial data, and diagnostics.
struct Recursion<'a> {
    theta: &'a ThetaSet,
    grid: SpatialGrid,
    dt: f64,
    diag: RecursionDiagnostics,
    probe_rng: ChaCha8Rng,
    probe_tolerance: f64,
}

fn data_digest(data: &[f64]) -> [u8; 32] {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Sha256::digest(&bytes).into()
}

impl Recursion<'_> {
    /// Solve with the given data over `tau` and return the value at the
    /// origin, memoized on the data's content hash.
    fn origin_value(
        &mut self,
        cache: &mut HashMap<[u8; 32], f64>,
        data: Vec<f64>,
        tau: f64,
    ) -> Result<f64> {
        match cache.entry(data_digest(&data)) {
            std::collections::hash_map::Entry::Occupied(e) => {
                self.diag.cache_hits += 1;
                Ok(*e.get())
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                let u =
                    solve_gheat_from_data(self.theta, &self.grid, data, tau, self.dt, &[], |_, _| {})?;
                self.diag.pde_solves += 1;
                Ok(*e.insert(u.at_origin()))
            }
        }
    }

    /// Solve with the given data over `tau` and return the whole final
    /// grid, memoized like [`Self::origin_value`].
    fn full_solution(
        &mut self,
        cache: &mut HashMap<[u8; 32], Vec<f64>>,
        data: Vec<f64>,
        tau: f64,
    ) -> Result<Vec<f64>> {
        match cache.entry(data_digest(&data)) {
            std::collections::hash_map::Entry::Occupied(e) => {
                self.diag.cache_hits += 1;
                Ok(e.get().clone())
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                let u =
                    solve_gheat_from_data(self.theta, &self.grid, data, tau, self.dt, &[], |_, _| {})?;
                self.diag.pde_solves += 1;
                Ok(e.insert(u.values().to_vec()).clone())
            }
        }
    }

    fn record_probe(&mut self, stage: &str, residual: f64) {
        if residual > self.diag.max_probe_residual {
            self.diag.max_probe_residual = residual;
        }
        if residual > self.probe_tolerance && self.diag.accuracy_warning.is_none() {
            self.diag.accuracy_warning = Some(format!(
                "anchor lattice too coarse in {stage}: probe residual {residual:.3e} \
                 exceeds tolerance {:.3e}",
                self.probe_tolerance
            ));
            log::warn!("{}", self.diag.accuracy_warning.as_deref().unwrap());
        }
    }

    /// Stage data for one anchor tuple: ψ(Δ) = φ_j(a₁, …, a_{j−1},
    /// a_{j−1} + Δ) sampled over the increment grid. For the builtin
    /// two-time increment form the shift cancels algebraically and the
    /// data is sampled as p(Δ) directly (anchor-independent bit for bit).
    fn stage_data(&self, stage: &StageInput<'_>, anchor: &[f64], d: usize) -> Vec<f64> {
        if let Some(p) = stage.increment {
            return sample_on_grid(&self.grid, |delta| p.eval(delta));
        }
        let depth_d = anchor.len();
        let mut args = vec![0.0; depth_d + d];
        args[..depth_d].copy_from_slice(anchor);
        sample_on_grid(&self.grid, |delta| {
            for c in 0..d {
                args[depth_d + c] = anchor[depth_d - d + c] + delta[c];
            }
            stage.current.eval(&args)
        })
    }

    /// One full reduction stage: φ_j (j = depth+1 time arguments) to
    /// φ_{j−1} on an anchor lattice of depth·d axes, over the increment
    /// horizon `tau`.
    fn full_stage(
        &mut self,
        stage: &StageInput<'_>,
        d: usize,
        plan: &BackwardRecursionPlan,
        stage_label: &str,
    ) -> Result<LatticeFunctional> {
        let axes_n = stage.depth * d;
        let a = plan.anchor_count(axes_n, self.grid.n_nodes());
        let axes = vec![
            LatticeAxis {
                n: a,
                half_width: self.grid.half_width(),
            };
            axes_n
        ];
        let total: usize = a.pow(axes_n as u32);
        let mut values = vec![0.0; total];
        let mut cache: HashMap<[u8; 32], f64> = HashMap::new();
        let mut anchor = vec![0.0; axes_n];
        for (flat, value) in values.iter_mut().enumerate() {
            let mut rem = flat;
            for ax in (0..axes_n).rev() {
                anchor[ax] = axes[ax].coord(rem % a);
                rem /= a;
            }
            let data = self.stage_data(stage, &anchor, d);
            *value = self.origin_value(&mut cache, data, stage.tau)?;
        }
        let lattice = LatticeFunctional::new(axes, values, stage_label)?;

        // Probe the interpolant at off-lattice anchors against direct
        // solves (cache makes these free when the stage collapsed).
        let n_probes = if d == 1 { 8 } else { 2 };
        let half = 0.5 * self.grid.half_width();
        for _ in 0..n_probes {
            let probe: Vec<f64> = (0..axes_n)
                .map(|_| self.probe_rng.random_range(-half..half))
                .collect();
            let data = self.stage_data(stage, &probe, d);
            let direct = self.origin_value(&mut cache, data, stage.tau)?;
            let residual = (direct - lattice.eval(&probe)).abs();
            self.record_probe(stage_label, residual);
        }
        self.diag.stages += 1;
        Ok(lattice)
    }
}

/// E[φ(B_{t₁}, …, B_{t_k})] by the backward recursion: k−1 increment
/// stages followed by one solve over t₁, read at the origin.
pub fn g_expectation(
    theta: &ThetaSet,
    f: &CylinderFunctional,
    plan: &BackwardRecursionPlan,
) -> Result<GExpectation> {
    validate_inputs(theta, f, plan)?;
    let times = f.times();
    let k = f.k();
    let d = f.dim();
    let params = plan.solver_params();
    let grid = params.resolve_grid(theta, times[k - 1])?;
    let dt = params.dt(theta, &grid);
    let mut rec = Recursion {
        theta,
        dt,
        diag: RecursionDiagnostics {
            n_nodes: grid.n_nodes(),
            half_width: grid.half_width(),
            ..Default::default()
        },
        grid,
        probe_rng: ChaCha8Rng::seed_from_u64(PROBE_SEED),
        probe_tolerance: plan.probe_tolerance,
    };

    let mut current = Current::Original(f);
    for j in (2..=k).rev() {
        let stage = StageInput {
            current: &current,
            increment: if j == k { f.increment_payoff() } else { None },
            depth: j - 1,
            tau: times[j - 1] - times[j - 2],
        };
        let label = format!("stage {j} of {}", f.label());
        let lattice = rec.full_stage(&stage, d, plan, &label)?;
        current = Current::Lattice(lattice);
    }

    let data = sample_on_grid(&rec.grid, |x| current.eval(x));
    let u = solve_gheat_from_data(theta, &rec.grid, data, times[0], dt, &[], |_, _| {})?;
    rec.diag.pde_solves += 1;
    rec.diag.stages += 1;
    Ok(GExpectation {
        value: u.at_origin(),
        diagnostics: rec.diag,
    })
}

/// The conditional G-expectation E_t[φ] as a functional of the frozen
/// values and B_t.
///
/// Times with t_i ≤ t are frozen; at t = t_i exactly, B_{t_i} is treated
/// as frozen (the left rule). For t strictly between partition points the
/// remaining horizon t_{i+1} − t is solved in absolute coordinates, so the
/// whole grid becomes the B_t axis of the reduced functional. Declared
/// Lipschitz constant and bound are carried over unchanged (the reduction
/// is a sublinear-expectation contraction in both).
pub fn conditional_g_expectation(
    theta: &ThetaSet,
    f: &CylinderFunctional,
    t: f64,
    plan: &BackwardRecursionPlan,
) -> Result<ConditionalGExpectation> {
    validate_inputs(theta, f, plan)?;
    if !t.is_finite() || t < 0.0 {
        return Err(GexpError::InvalidInput(format!(
            "conditioning time must be finite and nonnegative, got {t}"
        )));
    }
    let times = f.times().to_vec();
    let k = f.k();
    let d = f.dim();
    let eps = 1e-12 * times[k - 1].max(1.0);

    if t >= times[k - 1] - eps {
        return Ok(ConditionalGExpectation {
            reduction: ConditionalReduction::Identity,
            diagnostics: RecursionDiagnostics::default(),
        });
    }

    let frozen = times.iter().filter(|&&tk| tk <= t + eps).count();
    let on_node = frozen >= 1 && (t - times[frozen - 1]).abs() <= eps;

    let params = plan.solver_params();
    let grid = params.resolve_grid(theta, times[k - 1])?;
    let dt = params.dt(theta, &grid);
    let mut rec = Recursion {
        theta,
        dt,
        diag: RecursionDiagnostics {
            n_nodes: grid.n_nodes(),
            half_width: grid.half_width(),
            ..Default::default()
        },
        grid,
        probe_rng: ChaCha8Rng::seed_from_u64(PROBE_SEED),
        probe_tolerance: plan.probe_tolerance,
    };

    // Reduce with full increment stages until the functional has
    // `keep` time arguments: `frozen` when t sits on a partition point,
    // `frozen + 1` otherwise (the partial stage consumes the last one).
    let keep = if on_node { frozen } else { frozen + 1 };
    let mut current = Current::Original(f);
    for j in ((keep + 1)..=k).rev() {
        let stage = StageInput {
            current: &current,
            increment: if j == k { f.increment_payoff() } else { None },
            depth: j - 1,
            tau: times[j - 1] - times[j - 2],
        };
        let label = format!("stage {j} of E_t[{}]", f.label());
        let lattice = rec.full_stage(&stage, d, plan, &label)?;
        current = Current::Lattice(lattice);
    }

    if on_node {
        // t = t_frozen: the last frozen value doubles as the state at t.
        let lattice = match current {
            Current::Lattice(l) => l,
            // keep == k is unreachable: t >= t_k returned Identity above.
            Current::Original(_) => unreachable!("at least one stage runs when t < t_k"),
        };
        let reduced = CylinderFunctional::from_lattice(
            times[..frozen].to_vec(),
            d,
            Arc::new(lattice),
            f.lipschitz(),
            f.bound(),
            format!("E_t[{}] at t = t_{frozen}", f.label()),
        )?;
        return Ok(ConditionalGExpectation {
            reduction: ConditionalReduction::Reduced(reduced),
            diagnostics: rec.diag,
        });
    }

    // Partial stage over (t, t_{frozen+1}]: absolute coordinates, one
    // solve per frozen-anchor tuple, the whole grid becoming the B_t axis.
    let tau = times[frozen] - t;
    let label = format!("partial stage of E_t[{}]", f.label());
    let nz = rec.grid.total_nodes();

    if frozen == 0 {
        let data = sample_on_grid(&rec.grid, |z| current.eval(z));
        let u = solve_gheat_from_data(theta, &rec.grid, data, tau, dt, &[], |_, _| {})?;
        rec.diag.pde_solves += 1;
        rec.diag.stages += 1;
        if t <= eps {
            return Ok(ConditionalGExpectation {
                reduction: ConditionalReduction::Constant(u.at_origin()),
                diagnostics: rec.diag,
            });
        }
        let axes = grid_axes(&rec.grid);
        let lattice = LatticeFunctional::new(axes, u.values().to_vec(), &label)?;
        let reduced = CylinderFunctional::from_lattice(
            vec![t],
            d,
            Arc::new(lattice),
            f.lipschitz(),
            f.bound(),
            format!("E_t[{}]", f.label()),
        )?;
        return Ok(ConditionalGExpectation {
            reduction: ConditionalReduction::Reduced(reduced),
            diagnostics: rec.diag,
        });
    }

    let axes_n = frozen * d;
    let a = plan.anchor_count(axes_n, rec.grid.n_nodes());
    let anchor_axes = vec![
        LatticeAxis {
            n: a,
            half_width: rec.grid.half_width(),
        };
        axes_n
    ];
    let total: usize = a.pow(axes_n as u32);
    let mut values = vec![0.0; total * nz];
    let mut cache: HashMap<[u8; 32], Vec<f64>> = HashMap::new();
    let mut anchor = vec![0.0; axes_n];
    let mut args = vec![0.0; axes_n + d];
    for flat in 0..total {
        let mut rem = flat;
        for ax in (0..axes_n).rev() {
            anchor[ax] = anchor_axes[ax].coord(rem % a);
            rem /= a;
        }
        args[..axes_n].copy_from_slice(&anchor);
        let data = sample_on_grid(&rec.grid, |z| {
            args[axes_n..].copy_from_slice(z);
            current.eval(&args)
        });
        let slab = rec.full_solution(&mut cache, data, tau)?;
        values[flat * nz..(flat + 1) * nz].copy_from_slice(&slab);
    }
    let mut axes = anchor_axes;
    axes.extend(grid_axes(&rec.grid));
    let lattice = LatticeFunctional::new(axes, values, &label)?;

    // Probe off-lattice frozen anchors at an off-node state.
    let n_probes = if d == 1 { 4 } else { 2 };
    let half = 0.5 * rec.grid.half_width();
    for _ in 0..n_probes {
        let probe: Vec<f64> = (0..axes_n)
            .map(|_| rec.probe_rng.random_range(-half..half))
            .collect();
        let z: Vec<f64> = (0..d)
            .map(|_| rec.probe_rng.random_range(-half..half))
            .collect();
        args[..axes_n].copy_from_slice(&probe);
        let data = sample_on_grid(&rec.grid, |zz| {
            args[axes_n..].copy_from_slice(zz);
            current.eval(&args)
        });
        let slab = rec.full_solution(&mut cache, data, tau)?;
        let u = crate::gheat::GridFunction::new(rec.grid.clone(), tau, slab)?;
        let direct = evaluate_at(&u, &z)?;
        let mut at = probe.clone();
        at.extend_from_slice(&z);
        let residual = (direct - lattice.eval(&at)).abs();
        rec.record_probe(&label, residual);
    }
    rec.diag.stages += 1;

    let mut reduced_times = times[..frozen].to_vec();
    reduced_times.push(t);
    let reduced = CylinderFunctional::from_lattice(
        reduced_times,
        d,
        Arc::new(lattice),
        f.lipschitz(),
        f.bound(),
        format!("E_t[{}]", f.label()),
    )?;
    Ok(ConditionalGExpectation {
        reduction: ConditionalReduction::Reduced(reduced),
        diagnostics: rec.diag,
    })
}

/// The PDE grid's axes as lattice axes (d copies of the per-axis nodes).
fn grid_axes(grid: &SpatialGrid) -> Vec<LatticeAxis> {
    vec![
        LatticeAxis {
            n: grid.n_nodes(),
            half_width: grid.half_width(),
        };
        grid.dim()
    ]
}
