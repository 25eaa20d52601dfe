//! Simulation of controlled martingales ∫θ dW and the sup-over-controls
//! estimators: the Monte Carlo realization of the upper expectation
//! sup_θ E_{P_θ}[·] that the PDE backend is checked against.
//!
//! Three contracts hold everywhere:
//!
//! * **Common random numbers** — every policy of a family is driven by the
//!   same per-path ChaCha streams, keyed by `(seed, path index)`. That
//!   makes the max-over-policies estimator exactly subadditive and
//!   positively homogeneous and removes most argmax noise.
//! * **Determinism** — per-path values are collected into path order and
//!   reduced with pairwise summation, so results are bit-identical for any
//!   worker count.
//! * **Adaptedness** — policies see only the step index and the current
//!   state; increments are drawn after the control matrix is fixed.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GexpError, Result};
use crate::model::{
    fill_gaussian_increments, path_rng, ControlPolicy, CylinderFunctional, PathBundle, ThetaSet,
    TimeGrid,
};
use crate::numerics::mean_and_std_error;

/// Hard cap on generated family sizes (bang-bang enumeration grows as
/// members^blocks).
pub const MAX_FAMILY: usize = 4096;

// ---------------------------------------------------------------------------
// Bundle parameters and the per-path stepper
// ---------------------------------------------------------------------------

/// Everything a simulation needs besides the policy: grid, dimension,
/// path count, seed.
#[derive(Debug, Clone)]
pub struct BundleParams {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl BundleParams {
    pub fn new(grid: TimeGrid, dim: usize, n_paths: usize, seed: u64) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(GexpError::InvalidInput(format!(
                "supported dimensions are 1 and 2, got {dim}"
            )));
        }
        if n_paths == 0 {
            return Err(GexpError::InvalidInput("path count must be positive".to_string()));
        }
        Ok(Self {
            grid,
            dim,
            n_paths,
            seed,
        })
    }
}

/// Drives one path under one policy. The caller owns the controlled state
/// (and any transformed state) and passes whichever of them feeds the
/// policy; the stepper owns the RNG stream and the control scratch.
pub(crate) struct PathSim<'a> {
    policy: &'a ControlPolicy,
    rng: rand_chacha::ChaCha8Rng,
    sqrt_dt: f64,
    dim: usize,
    gamma: DMatrix<f64>,
    dw: [f64; 2],
}

impl<'a> PathSim<'a> {
    pub(crate) fn new(
        policy: &'a ControlPolicy,
        grid: &TimeGrid,
        dim: usize,
        seed: u64,
        path_index: usize,
    ) -> Self {
        PathSim {
            policy,
            rng: path_rng(seed, path_index as u64),
            sqrt_dt: grid.dt().sqrt(),
            dim,
            gamma: DMatrix::zeros(dim, dim),
            dw: [0.0; 2],
        }
    }

    /// Advances one step: picks γ_k = policy(k, feedback_state), draws
    /// ΔW_k, writes ΔB_k = γ_k·ΔW_k into `delta_b`, and exposes the raw
    /// increment via [`Self::last_dw`].
    pub(crate) fn step(&mut self, k: usize, feedback_state: &[f64], delta_b: &mut [f64]) {
        let d = self.dim;
        self.policy.emit(k, feedback_state, &mut self.gamma);
        fill_gaussian_increments(&mut self.rng, self.sqrt_dt, &mut self.dw[..d]);
        for (i, out) in delta_b.iter_mut().enumerate().take(d) {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.gamma[(i, j)] * self.dw[j];
            }
            *out = acc;
        }
    }

    /// Driving increment ΔW of the step just taken.
    pub(crate) fn last_dw(&self) -> &[f64] {
        &self.dw[..self.dim]
    }
}

/// Validates that a policy can run on this grid and dimension (schedule
/// length, guide step count). Feedback rules are trusted: their output was
/// validated at family construction.
fn check_policy(policy: &ControlPolicy, grid: &TimeGrid, dim: usize) -> Result<()> {
    match policy {
        ControlPolicy::Deterministic { schedule, .. } => {
            if schedule.len() != grid.n_steps() {
                return Err(GexpError::InvalidInput(format!(
                    "policy '{}' has {} schedule steps, grid has {}",
                    policy.label(),
                    schedule.len(),
                    grid.n_steps()
                )));
            }
            if let Some(m) = schedule.first() {
                if m.nrows() != dim {
                    return Err(GexpError::InvalidInput(format!(
                        "policy '{}' emits {}x{} matrices in dimension {dim}",
                        policy.label(),
                        m.nrows(),
                        m.ncols()
                    )));
                }
            }
        }
        ControlPolicy::PdeGuided { guide, .. } => {
            if guide.n_steps() != grid.n_steps() {
                return Err(GexpError::InvalidInput(format!(
                    "guide table for policy '{}' was built for {} steps, grid has {}",
                    policy.label(),
                    guide.n_steps(),
                    grid.n_steps()
                )));
            }
            if guide.grid().dim() != dim {
                return Err(GexpError::InvalidInput(format!(
                    "guide table dimension {} does not match bundle dimension {dim}",
                    guide.grid().dim()
                )));
            }
        }
        ControlPolicy::Feedback { .. } => {}
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Laws and plain estimators
// ---------------------------------------------------------------------------

/// Simulates the law P_θ: materializes all driving increments and the
/// controlled path B^θ_{t_{k+1}} = B^θ_{t_k} + γ_k·ΔW_k.
///
/// Feedback policies are fed the controlled path itself here; contexts
/// that feed a transformed process run their own loop over [`PathSim`].
pub fn simulate_law(policy: &ControlPolicy, params: &BundleParams) -> Result<PathBundle> {
    check_policy(policy, &params.grid, params.dim)?;
    let d = params.dim;
    let n = params.grid.n_steps();
    let m_paths = params.n_paths;
    let mut dw = vec![0.0; m_paths * n * d];
    let mut b = vec![0.0; m_paths * (n + 1) * d];

    dw.par_chunks_mut(n * d)
        .zip(b.par_chunks_mut((n + 1) * d))
        .enumerate()
        .for_each(|(m, (dw_row, b_row))| {
            let mut sim = PathSim::new(policy, &params.grid, d, params.seed, m);
            let mut delta = [0.0; 2];
            for k in 0..n {
                let (head, tail) = b_row.split_at_mut((k + 1) * d);
                let state = &head[k * d..];
                sim.step(k, state, &mut delta[..d]);
                dw_row[k * d..(k + 1) * d].copy_from_slice(sim.last_dw());
                for c in 0..d {
                    tail[c] = state[c] + delta[c];
                }
            }
        });

    Ok(PathBundle::from_parts(
        params.grid.clone(),
        d,
        m_paths,
        params.seed,
        dw,
        b,
    ))
}

/// A Monte Carlo estimate with its standard error and provenance.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateWithError {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Grid indices of a functional's evaluation times (snap-to-grid; more
/// than half a step off-grid is an input error).
fn snap_times(f: &CylinderFunctional, grid: &TimeGrid) -> Result<Vec<usize>> {
    f.times().iter().map(|&t| grid.snap(t)).collect()
}

/// Per-path values of f(B_{t₁}, …, B_{t_k}) on a materialized bundle.
pub fn per_path_values(f: &CylinderFunctional, bundle: &PathBundle) -> Result<Vec<f64>> {
    if f.dim() != bundle.dim() {
        return Err(GexpError::InvalidInput(format!(
            "functional dimension {} does not match bundle dimension {}",
            f.dim(),
            bundle.dim()
        )));
    }
    let ks = snap_times(f, bundle.grid())?;
    let d = bundle.dim();
    let mut args = vec![0.0; ks.len() * d];
    Ok((0..bundle.n_paths())
        .map(|m| {
            for (j, &k) in ks.iter().enumerate() {
                args[j * d..(j + 1) * d].copy_from_slice(bundle.point(m, k));
            }
            f.eval(&args)
        })
        .collect())
}

/// Sample mean ± standard error of a functional under one policy's law.
pub fn expectation_under(
    policy: &ControlPolicy,
    f: &CylinderFunctional,
    bundle: &PathBundle,
) -> Result<EstimateWithError> {
    check_policy(policy, bundle.grid(), bundle.dim())?;
    let values = per_path_values(f, bundle)?;
    let (value, std_error) = mean_and_std_error(&values);
    Ok(EstimateWithError {
        value,
        std_error,
        n_paths: bundle.n_paths(),
        seed: bundle.seed(),
    })
}

/// A shared evaluation plan for a battery of functionals on one grid:
/// the sorted union of every needed time index, plus each functional's
/// positions into that union.
#[derive(Debug, Clone)]
pub(crate) struct BatteryPlan {
    pub(crate) union: Vec<usize>,
    pub(crate) positions: Vec<Vec<usize>>,
}

impl BatteryPlan {
    pub(crate) fn new(fs: &[CylinderFunctional], grid: &TimeGrid) -> Result<Self> {
        let mut union: Vec<usize> = Vec::new();
        let per_f: Vec<Vec<usize>> = fs
            .iter()
            .map(|f| snap_times(f, grid))
            .collect::<Result<_>>()?;
        for ks in &per_f {
            union.extend_from_slice(ks);
        }
        union.sort_unstable();
        union.dedup();
        let positions = per_f
            .iter()
            .map(|ks| {
                ks.iter()
                    .map(|k| union.binary_search(k).expect("index is in the union"))
                    .collect()
            })
            .collect();
        Ok(BatteryPlan { union, positions })
    }

    /// Evaluates functional `i` on a recorded [union.len() × d] state
    /// buffer, assembling its argument list in time order.
    pub(crate) fn eval(
        &self,
        i: usize,
        f: &CylinderFunctional,
        recorded: &[f64],
        d: usize,
        args: &mut [f64],
    ) -> f64 {
        let pos = &self.positions[i];
        for (j, &p) in pos.iter().enumerate() {
            args[j * d..(j + 1) * d].copy_from_slice(&recorded[p * d..(p + 1) * d]);
        }
        f.eval(&args[..pos.len() * d])
    }
}

/// Streaming per-path values of a whole battery under one policy (no
/// bundle materialization): one walk per path, every functional read from
/// the same recorded states. Returns `values[functional][path]`.
fn streamed_values_battery(
    policy: &ControlPolicy,
    plan: &BatteryPlan,
    fs: &[CylinderFunctional],
    params: &BundleParams,
) -> Vec<Vec<f64>> {
    let d = params.dim;
    let n = params.grid.n_steps();
    let per_path: Vec<Vec<f64>> = (0..params.n_paths)
        .into_par_iter()
        .map(|m| {
            let mut sim = PathSim::new(policy, &params.grid, d, params.seed, m);
            let mut b = [0.0; 2];
            let mut delta = [0.0; 2];
            let mut recorded = vec![0.0; plan.union.len() * d];
            let mut args = [0.0; 8]; // k·d ≤ 8 ≥ the recursion caps
            let mut next = 0;
            for k in 0..n {
                while next < plan.union.len() && plan.union[next] == k {
                    recorded[next * d..(next + 1) * d].copy_from_slice(&b[..d]);
                    next += 1;
                }
                sim.step(k, &b[..d], &mut delta[..d]);
                for c in 0..d {
                    b[c] += delta[c];
                }
            }
            while next < plan.union.len() {
                recorded[next * d..(next + 1) * d].copy_from_slice(&b[..d]);
                next += 1;
            }
            fs.iter()
                .enumerate()
                .map(|(i, f)| plan.eval(i, f, &recorded, d, &mut args))
                .collect()
        })
        .collect();
    let mut out = vec![Vec::with_capacity(params.n_paths); fs.len()];
    for row in per_path {
        for (i, v) in row.into_iter().enumerate() {
            out[i].push(v);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Control families
// ---------------------------------------------------------------------------

/// A finite, nonempty family of policies sharing one time grid and one
/// uncertainty set: the sampled stand-in for the set of all admissible
/// Θ-valued controls.
#[derive(Debug, Clone)]
pub struct ControlFamily {
    theta: ThetaSet,
    grid: TimeGrid,
    policies: Vec<ControlPolicy>,
}

/// Short human-readable tag for a member matrix in policy labels.
fn member_tag(m: &DMatrix<f64>, index: usize) -> String {
    if m.nrows() == 1 {
        format!("sigma={}", m[(0, 0)])
    } else {
        format!("member{index}")
    }
}

impl ControlFamily {
    pub fn new(theta: ThetaSet, grid: TimeGrid, policies: Vec<ControlPolicy>) -> Result<Self> {
        if policies.is_empty() {
            return Err(GexpError::InvalidInput(
                "a control family must be nonempty".to_string(),
            ));
        }
        for p in &policies {
            check_policy(p, &grid, theta.dim())?;
        }
        Ok(Self {
            theta,
            grid,
            policies,
        })
    }

    /// One constant policy per extreme member of Θ.
    pub fn constants(theta: &ThetaSet, grid: TimeGrid) -> Result<Self> {
        let n = grid.n_steps();
        let policies = theta
            .extreme_members()
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let label = format!("const {}", member_tag(&m, i));
                ControlPolicy::constant(theta, m, n, label)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(theta.clone(), grid, policies)
    }

    /// Exhaustive bang-bang enumeration: every assignment of an extreme
    /// member to each of `n_blocks` equal time blocks.
    pub fn bang_bang(theta: &ThetaSet, grid: TimeGrid, n_blocks: usize) -> Result<Self> {
        if n_blocks == 0 || n_blocks > grid.n_steps() {
            return Err(GexpError::InvalidInput(format!(
                "bang-bang blocks must lie in 1..={}, got {n_blocks}",
                grid.n_steps()
            )));
        }
        let members = theta.extreme_members();
        let count = members
            .len()
            .checked_pow(n_blocks as u32)
            .filter(|&c| c <= MAX_FAMILY)
            .ok_or_else(|| {
                GexpError::InvalidInput(format!(
                    "bang-bang family {}^{n_blocks} exceeds the cap {MAX_FAMILY}",
                    members.len()
                ))
            })?;
        let n = grid.n_steps();
        let mut policies = Vec::with_capacity(count);
        for assignment in 0..count {
            let mut digits = vec![0usize; n_blocks];
            let mut rem = assignment;
            for d in (0..n_blocks).rev() {
                digits[d] = rem % members.len();
                rem /= members.len();
            }
            let schedule: Vec<DMatrix<f64>> = (0..n)
                .map(|k| {
                    // Equal blocks; the last block absorbs the remainder.
                    let block = (k * n_blocks / n).min(n_blocks - 1);
                    members[digits[block]].clone()
                })
                .collect();
            let label = format!(
                "bang-bang {}",
                digits
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("")
            );
            policies.push(ControlPolicy::deterministic(theta, schedule, label)?);
        }
        Self::new(theta.clone(), grid, policies)
    }

    /// Random Θ-valued schedules: per step an extreme member is picked
    /// uniformly, except for the interval set where σ is drawn uniformly
    /// from [σ_low, σ_high] (sampling the interior, not just endpoints).
    pub fn random_schedules(
        theta: &ThetaSet,
        grid: TimeGrid,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand::Rng;
        use rand::SeedableRng;
        if count == 0 || count > MAX_FAMILY {
            return Err(GexpError::InvalidInput(format!(
                "random schedule count must lie in 1..={MAX_FAMILY}, got {count}"
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let members = theta.extreme_members();
        let interval = matches!(
            theta.kind(),
            crate::model::ThetaKind::Interval1d { .. }
        );
        let n = grid.n_steps();
        let mut policies = Vec::with_capacity(count);
        for i in 0..count {
            let schedule: Vec<DMatrix<f64>> = (0..n)
                .map(|_| {
                    if interval {
                        let (lo, hi) = match theta.kind() {
                            crate::model::ThetaKind::Interval1d {
                                sigma_low,
                                sigma_high,
                            } => (*sigma_low, *sigma_high),
                            _ => unreachable!(),
                        };
                        DMatrix::from_element(1, 1, rng.random_range(lo..=hi))
                    } else {
                        members[rng.random_range(0..members.len())].clone()
                    }
                })
                .collect();
            policies.push(ControlPolicy::deterministic(
                theta,
                schedule,
                format!("random schedule {i}"),
            )?);
        }
        Self::new(theta.clone(), grid, policies)
    }

    /// Adds a policy (e.g. a PDE-guided one) to the family.
    pub fn with_policy(mut self, policy: ControlPolicy) -> Result<Self> {
        check_policy(&policy, &self.grid, self.theta.dim())?;
        self.policies.push(policy);
        Ok(self)
    }

    /// Merges another family over the same grid and uncertainty set.
    pub fn merged(mut self, other: ControlFamily) -> Result<Self> {
        if other.grid.n_steps() != self.grid.n_steps()
            || other.grid.horizon() != self.grid.horizon()
            || other.theta != self.theta
        {
            return Err(GexpError::InvalidInput(
                "control families can only merge over one grid and uncertainty set".to_string(),
            ));
        }
        self.policies.extend(other.policies);
        Ok(self)
    }

    pub fn theta(&self) -> &ThetaSet {
        &self.theta
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    pub fn policies(&self) -> &[ControlPolicy] {
        &self.policies
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Family estimators
// ---------------------------------------------------------------------------

/// One policy's estimate inside a family sweep.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyEstimate {
    pub label: String,
    pub value: f64,
    pub std_error: f64,
}

/// Max-over-policies estimate. The standard error reported is the argmax
/// policy's own (the max-of-means selection bias is not corrected; bands
/// downstream are sized for that).
#[derive(Debug, Clone, Serialize)]
pub struct UpperExpectation {
    pub estimate: EstimateWithError,
    pub argmax_index: usize,
    pub argmax_label: String,
    pub per_policy: Vec<PolicyEstimate>,
}

/// Selects the max-of-means row (first maximum on exact ties) and wraps
/// it as an [`UpperExpectation`].
fn assemble_upper(
    family: &ControlFamily,
    per_policy: Vec<PolicyEstimate>,
    params: &BundleParams,
) -> UpperExpectation {
    let mut best = 0;
    for (i, p) in per_policy.iter().enumerate() {
        if p.value > per_policy[best].value {
            best = i;
        }
    }
    UpperExpectation {
        estimate: EstimateWithError {
            value: per_policy[best].value,
            std_error: per_policy[best].std_error,
            n_paths: params.n_paths,
            seed: params.seed,
        },
        argmax_index: best,
        argmax_label: family.policies()[best].label().to_string(),
        per_policy,
    }
}

/// sup_θ E_{P_θ}[f] over a finite family, with common random numbers:
/// every policy sees the same per-path driving streams, so the estimator
/// is exactly monotone in family inclusion and exactly sublinear in f (up
/// to floating-point rounding of per-path sums).
pub fn upper_expectation(
    family: &ControlFamily,
    f: &CylinderFunctional,
    params: &BundleParams,
) -> Result<UpperExpectation> {
    Ok(upper_expectation_battery(family, std::slice::from_ref(f), params)?
        .pop()
        .expect("one functional in, one estimate out"))
}

/// [`upper_expectation`] for a whole battery in one pass: each policy's
/// paths are walked once and every functional is read from the same
/// recorded states, so battery results are mutually consistent under
/// common random numbers.
pub fn upper_expectation_battery(
    family: &ControlFamily,
    fs: &[CylinderFunctional],
    params: &BundleParams,
) -> Result<Vec<UpperExpectation>> {
    if fs.is_empty() {
        return Err(GexpError::InvalidInput(
            "the functional battery must be nonempty".to_string(),
        ));
    }
    if family.dim() != params.dim || fs.iter().any(|f| f.dim() != params.dim) {
        return Err(GexpError::InvalidInput(
            "functional, family, and bundle dimensions must agree".to_string(),
        ));
    }
    let plan = BatteryPlan::new(fs, &params.grid)?;
    let mut rows: Vec<Vec<PolicyEstimate>> = vec![Vec::with_capacity(family.len()); fs.len()];
    for policy in family.policies() {
        let values = streamed_values_battery(policy, &plan, fs, params);
        for (i, vals) in values.into_iter().enumerate() {
            let (value, se) = mean_and_std_error(&vals);
            rows[i].push(PolicyEstimate {
                label: policy.label().to_string(),
                value,
                std_error: se,
            });
        }
    }
    Ok(rows
        .into_iter()
        .map(|per_policy| assemble_upper(family, per_policy, params))
        .collect())
}

// ---------------------------------------------------------------------------
// Capacities
// ---------------------------------------------------------------------------

/// Path events measurable from grid values, for capacity estimation.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathEvent {
    /// The whole sample space (capacity 1 exactly).
    WholeSpace,
    /// The empty event (capacity 0 exactly).
    Empty,
    /// B^i_T > level.
    FinalAbove {
        #[serde(default)]
        coord: usize,
        level: f64,
    },
    /// B^i_T < level.
    FinalBelow {
        #[serde(default)]
        coord: usize,
        level: f64,
    },
    /// max_k B^i_{t_k} > level.
    RunningMaxAbove {
        #[serde(default)]
        coord: usize,
        level: f64,
    },
    /// min_k B^i_{t_k} < level.
    RunningMinBelow {
        #[serde(default)]
        coord: usize,
        level: f64,
    },
}

impl PathEvent {
    fn validate(&self, dim: usize) -> Result<()> {
        let coord = match self {
            PathEvent::WholeSpace | PathEvent::Empty => return Ok(()),
            PathEvent::FinalAbove { coord, .. }
            | PathEvent::FinalBelow { coord, .. }
            | PathEvent::RunningMaxAbove { coord, .. }
            | PathEvent::RunningMinBelow { coord, .. } => *coord,
        };
        if coord >= dim {
            return Err(GexpError::InvalidInput(format!(
                "event coordinate {coord} out of range for dimension {dim}"
            )));
        }
        Ok(())
    }
}

/// Capacity of an event: max over the family of its empirical probability.
pub fn capacity(
    family: &ControlFamily,
    event: &PathEvent,
    params: &BundleParams,
) -> Result<UpperExpectation> {
    event.validate(params.dim)?;
    if family.dim() != params.dim {
        return Err(GexpError::InvalidInput(
            "family and bundle dimensions must agree".to_string(),
        ));
    }
    let d = params.dim;
    let n = params.grid.n_steps();
    let mut per_policy = Vec::with_capacity(family.len());
    for policy in family.policies() {
        let values: Vec<f64> = (0..params.n_paths)
            .into_par_iter()
            .map(|m| {
                let mut sim = PathSim::new(policy, &params.grid, d, params.seed, m);
                let mut b = [0.0; 2];
                let mut delta = [0.0; 2];
                let mut running_max = [0.0_f64; 2];
                let mut running_min = [0.0_f64; 2];
                for k in 0..n {
                    sim.step(k, &b[..d], &mut delta[..d]);
                    for c in 0..d {
                        b[c] += delta[c];
                        running_max[c] = running_max[c].max(b[c]);
                        running_min[c] = running_min[c].min(b[c]);
                    }
                }
                let hit = match *event {
                    PathEvent::WholeSpace => true,
                    PathEvent::Empty => false,
                    PathEvent::FinalAbove { coord, level } => b[coord] > level,
                    PathEvent::FinalBelow { coord, level } => b[coord] < level,
                    PathEvent::RunningMaxAbove { coord, level } => running_max[coord] > level,
                    PathEvent::RunningMinBelow { coord, level } => running_min[coord] < level,
                };
                f64::from(u8::from(hit))
            })
            .collect();
        let (value, se) = mean_and_std_error(&values);
        per_policy.push(PolicyEstimate {
            label: policy.label().to_string(),
            value,
            std_error: se,
        });
    }
    Ok(assemble_upper(family, per_policy, params))
}
