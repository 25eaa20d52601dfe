//! The measure-change experiment: build the weighted sublinear expectation
//! Ê[·] = max_θ E_{P_θ}[· D_T], verify that the drift-removed process B̂
//! is G-Brownian under it (its functionals match the plain G-expectation
//! of the same functionals of B, computed by both backends), and check
//! the exponential-moment condition that certifies the density as a true
//! symmetric martingale at desk scale.
//!
//! Simulation contract for every sweep here: one walk per (policy, path)
//! drives all estimators; driving streams are keyed by (seed, path) only,
//! so all policies and all functionals share common random numbers; the
//! drift integrand h is always evaluated at (t_k, B_{t_k}) on the
//! controlled path; feedback-style policies are fed B̂ (the process whose
//! functionals are being maximized — still adapted, since B̂ is a known
//! function of B up to time t_k).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GexpError, Result};
use crate::expectation::{g_expectation, BackwardRecursionPlan};
use crate::model::{CylinderFunctional, ThetaSet};
use crate::montecarlo::{
    upper_expectation_battery, BatteryPlan, BundleParams, ControlFamily, EstimateWithError,
    PathSim, PolicyEstimate, UpperExpectation,
};
use crate::numerics::{mean_and_std_error, pairwise_sum};
use crate::stochcalc::{Integrand, TransformAccumulator, LOG_DENSITY_LIMIT};

/// Number of interior grid times at which the density's mean is checked.
pub const DENSITY_CHECK_TIMES: usize = 8;

// ---------------------------------------------------------------------------
// Specification of a weighted-expectation experiment
// ---------------------------------------------------------------------------

/// Everything a measure-change run needs. Validity demands a
/// nondegeneracy floor on Θ (a degenerate volatility direction cannot
/// absorb a drift) and a bounded integrand.
#[derive(Debug, Clone)]
pub struct WeightedExpectationSpec {
    pub theta: ThetaSet,
    pub integrand: Integrand,
    pub family: ControlFamily,
    pub battery: Vec<CylinderFunctional>,
    pub params: BundleParams,
}

impl WeightedExpectationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.theta.nondegeneracy_floor().is_none() {
            return Err(GexpError::InvalidInput(
                "the uncertainty set must declare a nondegeneracy floor for measure-change runs"
                    .to_string(),
            ));
        }
        if !self.integrand.h_max().is_finite() {
            return Err(GexpError::InvalidInput(
                "the drift integrand must be bounded".to_string(),
            ));
        }
        let d = self.theta.dim();
        if self.integrand.dim() != d || self.family.dim() != d || self.params.dim != d {
            return Err(GexpError::InvalidInput(
                "uncertainty set, integrand, family, and bundle dimensions must agree".to_string(),
            ));
        }
        if self.family.theta().kind() != self.theta.kind() {
            return Err(GexpError::InvalidInput(
                "the control family was built for a different uncertainty set".to_string(),
            ));
        }
        if self.battery.is_empty() {
            return Err(GexpError::InvalidInput(
                "the functional battery must be nonempty".to_string(),
            ));
        }
        if let Some(f) = self.battery.iter().find(|f| f.dim() != d) {
            return Err(GexpError::InvalidInput(format!(
                "functional '{}' has dimension {}, expected {d}",
                f.label(),
                f.dim()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The common sweep
// ---------------------------------------------------------------------------

/// Per-path outputs of one policy's walk.
struct PathOutcome {
    /// f(B̂ at its times)·D_T per battery functional.
    weighted: Vec<f64>,
    /// D at each density-check index.
    d_checks: [f64; DENSITY_CHECK_TIMES],
    /// Per coordinate: 1.0 if realized ⟨B̂ⁱ⟩_T exceeded its bound.
    qv_excess: [f64; 2],
}

/// Per-policy aggregates of one sweep.
struct PolicySweep {
    weighted: Vec<(f64, f64)>,
    d_checks: Vec<(f64, f64)>,
    qv_excess_fraction: Vec<f64>,
}

/// Indices (into the time grid) used for density checks: eight roughly
/// equally spaced interior-to-final times (D_0 = 1 identically, so 0 is
/// never checked).
fn density_check_indices(n_steps: usize) -> [usize; DENSITY_CHECK_TIMES] {
    let mut out = [0usize; DENSITY_CHECK_TIMES];
    for (j, slot) in out.iter_mut().enumerate() {
        *slot = ((j + 1) * n_steps).div_ceil(DENSITY_CHECK_TIMES).min(n_steps);
    }
    out
}

/// Walks every (policy, path) once, producing for each policy: the
/// weighted estimate of every battery functional, the mean density at the
/// check times, and the fraction of paths whose realized ⟨B̂ⁱ⟩_T exceeds
/// `qv_bounds[i]·(1 + qv_margin)`.
fn weighted_sweep(
    integrand: &Integrand,
    family: &ControlFamily,
    battery: &[CylinderFunctional],
    params: &BundleParams,
    qv_margin: f64,
) -> Result<Vec<PolicySweep>> {
    let plan = BatteryPlan::new(battery, &params.grid)?;
    let d = params.dim;
    let n = params.grid.n_steps();
    let t_final = params.grid.horizon();
    let times = params.grid.times().to_vec();
    let check_idx = density_check_indices(n);
    let qv_bounds: Vec<f64> = family
        .theta()
        .max_diffusion_diag()
        .iter()
        .map(|c| c * t_final)
        .collect();

    let mut sweeps = Vec::with_capacity(family.len());
    for policy in family.policies() {
        let outcomes: Vec<PathOutcome> = (0..params.n_paths)
            .into_par_iter()
            .map(|m| -> Result<PathOutcome> {
                let mut sim = PathSim::new(policy, &params.grid, d, params.seed, m);
                let mut acc = TransformAccumulator::new(integrand);
                let mut delta = [0.0_f64; 2];
                let mut recorded = vec![0.0; plan.union.len() * d];
                let mut d_checks = [0.0_f64; DENSITY_CHECK_TIMES];
                let mut next_rec = 0;
                let mut next_chk = 0;
                // k walks three index-aligned sequences (recording plan,
                // check schedule, partition times); iterating any single one
                // would hide that alignment.
                #[allow(clippy::needless_range_loop)]
                for k in 0..=n {
                    while next_rec < plan.union.len() && plan.union[next_rec] == k {
                        recorded[next_rec * d..(next_rec + 1) * d]
                            .copy_from_slice(&acc.b_hat[..d]);
                        next_rec += 1;
                    }
                    while next_chk < DENSITY_CHECK_TIMES && check_idx[next_chk] == k {
                        d_checks[next_chk] = acc.log_density().exp();
                        next_chk += 1;
                    }
                    if k == n {
                        break;
                    }
                    sim.step(k, &acc.b_hat[..d], &mut delta[..d]);
                    acc.advance(times[k], &delta[..d])?;
                }
                let log_d = acc.log_density();
                // NaN must trip the guard too: a poisoned accumulator is an overflow.
                if log_d.is_nan() || log_d > LOG_DENSITY_LIMIT {
                    return Err(GexpError::DensityOverflow {
                        path: m,
                        step: n,
                        log_density: log_d,
                        ito: acc.ito,
                        qv_form: acc.qv_form,
                    });
                }
                let weight = log_d.exp();
                let mut args = [0.0_f64; 8];
                let weighted = battery
                    .iter()
                    .enumerate()
                    .map(|(i, f)| plan.eval(i, f, &recorded, d, &mut args) * weight)
                    .collect();
                let mut qv_excess = [0.0_f64; 2];
                for c in 0..d {
                    if acc.qv_hat[c] > qv_bounds[c] * (1.0 + qv_margin) {
                        qv_excess[c] = 1.0;
                    }
                }
                Ok(PathOutcome {
                    weighted,
                    d_checks,
                    qv_excess,
                })
            })
            .collect::<Result<_>>()?;

        let m_paths = outcomes.len();
        let mut weighted = Vec::with_capacity(battery.len());
        let mut column = vec![0.0; m_paths];
        for i in 0..battery.len() {
            for (slot, o) in column.iter_mut().zip(&outcomes) {
                *slot = o.weighted[i];
            }
            weighted.push(mean_and_std_error(&column));
        }
        let mut d_checks = Vec::with_capacity(DENSITY_CHECK_TIMES);
        for j in 0..DENSITY_CHECK_TIMES {
            for (slot, o) in column.iter_mut().zip(&outcomes) {
                *slot = o.d_checks[j];
            }
            d_checks.push(mean_and_std_error(&column));
        }
        let mut qv_excess_fraction = Vec::with_capacity(d);
        for c in 0..d {
            for (slot, o) in column.iter_mut().zip(&outcomes) {
                *slot = o.qv_excess[c];
            }
            qv_excess_fraction.push(pairwise_sum(&column) / m_paths as f64);
        }
        sweeps.push(PolicySweep {
            weighted,
            d_checks,
            qv_excess_fraction,
        });
    }
    Ok(sweeps)
}

// ---------------------------------------------------------------------------
// Weighted expectation
// ---------------------------------------------------------------------------

/// Ê[f(B̂)] = max_θ E_{P_θ}[f(B̂_{t₁},…,B̂_{t_k})·D_T] over the family,
/// with common random numbers.
pub fn weighted_expectation(
    spec: &WeightedExpectationSpec,
    f: &CylinderFunctional,
) -> Result<UpperExpectation> {
    spec.validate()?;
    let battery = std::slice::from_ref(f);
    let sweeps = weighted_sweep(&spec.integrand, &spec.family, battery, &spec.params, 0.05)?;
    let per_policy: Vec<PolicyEstimate> = spec
        .family
        .policies()
        .iter()
        .zip(&sweeps)
        .map(|(p, s)| PolicyEstimate {
            label: p.label().to_string(),
            value: s.weighted[0].0,
            std_error: s.weighted[0].1,
        })
        .collect();
    let mut best = 0;
    for (i, p) in per_policy.iter().enumerate() {
        if p.value > per_policy[best].value {
            best = i;
        }
    }
    Ok(UpperExpectation {
        estimate: EstimateWithError {
            value: per_policy[best].value,
            std_error: per_policy[best].std_error,
            n_paths: spec.params.n_paths,
            seed: spec.params.seed,
        },
        argmax_index: best,
        argmax_label: per_policy[best].label.clone(),
        per_policy,
    })
}

// ---------------------------------------------------------------------------
// Exponential-moment (Novikov-type) check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NovikovVerdict {
    /// Every policy's exponential moment is finite and stable under
    /// doubling the path count.
    SatisfiedAtDeskScale,
    /// The moment overflowed or drifted under doubling.
    Diverging,
}

/// One policy's exponential-moment estimate, with the stability probe:
/// the first half of the paths is a prefix of the full run (stream-keyed
/// seeding), so `half_paths` vs `full_paths` isolates pure sample-growth
/// drift.
#[derive(Debug, Clone, Serialize)]
pub struct NovikovMoment {
    pub label: String,
    pub half_paths: f64,
    pub full_paths: f64,
    pub std_error: f64,
    /// |full − half| / max(|half|, 1e-300).
    pub drift: f64,
    pub stable: bool,
}

/// Outcome of the exponential-moment condition at one ε.
#[derive(Debug, Clone, Serialize)]
pub struct NovikovReport {
    pub epsilon: f64,
    pub p: f64,
    pub q: f64,
    /// max relative gap of the two conjugate-exponent identities.
    pub identity_rel_gap: f64,
    pub per_policy: Vec<NovikovMoment>,
    /// sup over the family of E[exp(½(1+ε)·∫h·(d⟨B⟩h))], full path count.
    pub estimate: f64,
    pub argmax_label: String,
    /// exp(½(1+ε)·H²σ²_max·T): the continuous-time deterministic bound.
    pub continuous_bound: f64,
    /// (1 − (1+ε)H²σ²_max·Δt)^{−Nd/2}: the same bound for the discrete
    /// scheme (+∞ when the step is too coarse for it to exist).
    pub discrete_bound: f64,
    pub verdict: NovikovVerdict,
}

/// Conjugate exponents from the ε-shifted Hölder pair used to certify the
/// density: p = (1+ε)/(2√(1+ε)−1), q = (2√(1+ε)−1)/√(1+ε), which satisfy
/// p²q² = pq(pq−1)/(q−1) = 1+ε.
pub fn novikov_exponents(epsilon: f64) -> Result<(f64, f64, f64)> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(GexpError::InvalidInput(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    let r = (1.0 + epsilon).sqrt();
    let p = (1.0 + epsilon) / (2.0 * r - 1.0);
    let q = (2.0 * r - 1.0) / r;
    let pq = p * q;
    let lhs1 = pq * pq;
    let lhs2 = pq * (pq - 1.0) / (q - 1.0);
    let target = 1.0 + epsilon;
    let gap = ((lhs1 - target).abs() / target).max((lhs2 - target).abs() / target);
    if gap > 1e-12 {
        return Err(GexpError::Config(format!(
            "conjugate-exponent identity violated at epsilon = {epsilon}: relative gap {gap:e}"
        )));
    }
    Ok((p, q, gap))
}

/// Estimates the exponential moment sup_θ E_{P_θ}[exp(½(1+ε)·qv_form_T)]
/// by simulation, doubling the path count to probe stability. Overflow is
/// a verdict, not an error: an infinite or drifting estimate yields
/// [`NovikovVerdict::Diverging`].
pub fn novikov_check(
    theta: &ThetaSet,
    h: &Integrand,
    epsilon: f64,
    family: &ControlFamily,
    params: &BundleParams,
) -> Result<NovikovReport> {
    let (p, q, identity_rel_gap) = novikov_exponents(epsilon)?;
    if h.dim() != params.dim || family.dim() != params.dim || theta.dim() != params.dim {
        return Err(GexpError::InvalidInput(
            "uncertainty set, integrand, family, and bundle dimensions must agree".to_string(),
        ));
    }
    let c = 0.5 * (1.0 + epsilon);
    let d = params.dim;
    let n = params.grid.n_steps();
    let t_final = params.grid.horizon();
    let times = params.grid.times().to_vec();
    let m_full = 2 * params.n_paths;

    let mut per_policy = Vec::with_capacity(family.len());
    for policy in family.policies() {
        let values: Vec<f64> = (0..m_full)
            .into_par_iter()
            .map(|m| -> Result<f64> {
                let mut sim = PathSim::new(policy, &params.grid, d, params.seed, m);
                let mut acc = TransformAccumulator::new(h);
                let mut delta = [0.0_f64; 2];
                for (k, &t_k) in times.iter().enumerate().take(n) {
                    sim.step(k, &acc.b[..d], &mut delta[..d]);
                    acc.advance(t_k, &delta[..d])?;
                }
                // exp overflow deliberately produces +inf here: divergence
                // of the moment is data for the verdict.
                Ok((c * acc.qv_form).exp())
            })
            .collect::<Result<_>>()?;
        let (half, _) = mean_and_std_error(&values[..params.n_paths]);
        let (full, se) = mean_and_std_error(&values);
        let drift = (full - half).abs() / half.abs().max(1e-300);
        let stable = full.is_finite() && drift < 0.01;
        per_policy.push(NovikovMoment {
            label: policy.label().to_string(),
            half_paths: half,
            full_paths: full,
            std_error: se,
            drift,
            stable,
        });
    }

    let mut best = 0;
    for (i, m) in per_policy.iter().enumerate() {
        if m.full_paths > per_policy[best].full_paths {
            best = i;
        }
    }
    let estimate = per_policy[best].full_paths;
    let argmax_label = per_policy[best].label.clone();
    let verdict = if estimate.is_finite() && per_policy.iter().all(|m| m.stable) {
        NovikovVerdict::SatisfiedAtDeskScale
    } else {
        NovikovVerdict::Diverging
    };

    let a = c * h.h_max().powi(2) * theta.sigma_max_sq();
    let continuous_bound = (a * t_final).exp();
    let dt = params.grid.dt();
    let discrete_bound = if 2.0 * a * dt < 1.0 {
        (1.0 - 2.0 * a * dt).powf(-((n * d) as f64) / 2.0)
    } else {
        f64::INFINITY
    };

    Ok(NovikovReport {
        epsilon,
        p,
        q,
        identity_rel_gap,
        per_policy,
        estimate,
        argmax_label,
        continuous_bound,
        discrete_bound,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// Realized quadratic-variation bound
// ---------------------------------------------------------------------------

/// Fractions of paths whose realized ⟨B̂ⁱ⟩_T exceeds Cᵢ·T·(1+margin),
/// where Cᵢ is the largest i-th diagonal of γγ* over Θ.
#[derive(Debug, Clone, Serialize)]
pub struct QvExcessReport {
    pub margin: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    /// Cᵢ·T per coordinate.
    pub bounds: Vec<f64>,
    /// `[policy][coordinate]` violation fractions.
    pub per_policy: Vec<(String, Vec<f64>)>,
    /// Worst fraction over policies and coordinates.
    pub max_fraction: f64,
}

/// Measures how often the realized quadratic variation of the transformed
/// process escapes its uncertainty-set bound. The excess is a pure
/// discretization artifact, so the fraction must fall as the grid refines
/// — the acceptance run asserts the halving.
pub fn qv_excess_fraction(
    h: &Integrand,
    family: &ControlFamily,
    params: &BundleParams,
    margin: f64,
) -> Result<QvExcessReport> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(GexpError::InvalidInput(format!(
            "margin must be nonnegative, got {margin}"
        )));
    }
    if h.dim() != params.dim || family.dim() != params.dim {
        return Err(GexpError::InvalidInput(
            "integrand, family, and bundle dimensions must agree".to_string(),
        ));
    }
    let constant_one = CylinderFunctional::custom(
        params.dim,
        vec![params.grid.horizon()],
        |_| 1.0,
        0.0,
        1.0,
        "1",
    )?;
    let sweeps = weighted_sweep(h, family, std::slice::from_ref(&constant_one), params, margin)?;
    let t_final = params.grid.horizon();
    let bounds: Vec<f64> = family
        .theta()
        .max_diffusion_diag()
        .iter()
        .map(|c| c * t_final)
        .collect();
    let per_policy: Vec<(String, Vec<f64>)> = family
        .policies()
        .iter()
        .zip(&sweeps)
        .map(|(p, s)| (p.label().to_string(), s.qv_excess_fraction.clone()))
        .collect();
    let max_fraction = per_policy
        .iter()
        .flat_map(|(_, fr)| fr.iter().copied())
        .fold(0.0, f64::max);
    Ok(QvExcessReport {
        margin,
        n_steps: params.grid.n_steps(),
        n_paths: params.n_paths,
        bounds,
        per_policy,
        max_fraction,
    })
}

// ---------------------------------------------------------------------------
// The verification report
// ---------------------------------------------------------------------------

/// One battery functional's verdict: the weighted expectation of the
/// functional on B̂ against the plain G-expectation of the same functional
/// on B, from both backends.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionalCheck {
    pub label: String,
    pub lhs: f64,
    pub lhs_se: f64,
    pub lhs_argmax: String,
    pub rhs_pde: f64,
    pub rhs_mc: f64,
    pub rhs_mc_se: f64,
    /// |lhs − rhs_pde|.
    pub gap: f64,
    /// 3·lhs_se + pde_tolerance.
    pub band: f64,
    pub pass: bool,
}

/// Mean density at one check time under one policy.
#[derive(Debug, Clone, Serialize)]
pub struct DensityCheck {
    pub policy: String,
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GirsanovReport {
    pub novikov: NovikovReport,
    pub functionals: Vec<FunctionalCheck>,
    pub density_checks: Vec<DensityCheck>,
    /// Diagnostic (not gating): realized-QV excess fractions at this
    /// run's step count.
    pub qv_excess: Vec<(String, Vec<f64>)>,
    pub pde_tolerance: f64,
    pub overall_pass: bool,
}

/// Runs the full verification: the exponential-moment precheck first (a
/// diverging density voids the experiment's hypothesis — the report is
/// returned with `overall_pass = false` and no functional rows), then one
/// weighted sweep for all lhs values and density diagnostics, then the
/// two independent rhs backends per functional.
pub fn verify_girsanov(
    spec: &WeightedExpectationSpec,
    epsilon: f64,
    pde_tolerance: f64,
    plan: Option<&BackwardRecursionPlan>,
) -> Result<GirsanovReport> {
    spec.validate()?;
    if !(pde_tolerance.is_finite() && pde_tolerance > 0.0) {
        return Err(GexpError::InvalidInput(format!(
            "pde_tolerance must be positive, got {pde_tolerance}"
        )));
    }
    let novikov = novikov_check(
        &spec.theta,
        &spec.integrand,
        epsilon,
        &spec.family,
        &spec.params,
    )?;
    if novikov.verdict == NovikovVerdict::Diverging {
        log::warn!(
            "exponential-moment precheck diverged (estimate {}); skipping functional checks",
            novikov.estimate
        );
        return Ok(GirsanovReport {
            novikov,
            functionals: Vec::new(),
            density_checks: Vec::new(),
            qv_excess: Vec::new(),
            pde_tolerance,
            overall_pass: false,
        });
    }

    let default_plan = BackwardRecursionPlan::default_for_dim(spec.theta.dim());
    let plan = plan.unwrap_or(&default_plan);

    let sweeps = weighted_sweep(
        &spec.integrand,
        &spec.family,
        &spec.battery,
        &spec.params,
        0.05,
    )?;
    let rhs_mc_all = upper_expectation_battery(&spec.family, &spec.battery, &spec.params)?;

    let mut functionals = Vec::with_capacity(spec.battery.len());
    for (i, f) in spec.battery.iter().enumerate() {
        let mut best = 0;
        for (j, s) in sweeps.iter().enumerate() {
            if s.weighted[i].0 > sweeps[best].weighted[i].0 {
                best = j;
            }
        }
        let (lhs, lhs_se) = sweeps[best].weighted[i];
        let rhs_pde = g_expectation(&spec.theta, f, plan)?.value;
        let rhs_mc = &rhs_mc_all[i];
        let gap = (lhs - rhs_pde).abs();
        let band = 3.0 * lhs_se + pde_tolerance;
        functionals.push(FunctionalCheck {
            label: f.label().to_string(),
            lhs,
            lhs_se,
            lhs_argmax: spec.family.policies()[best].label().to_string(),
            rhs_pde,
            rhs_mc: rhs_mc.estimate.value,
            rhs_mc_se: rhs_mc.estimate.std_error,
            gap,
            band,
            pass: gap <= band,
        });
    }

    let check_idx = density_check_indices(spec.params.grid.n_steps());
    let times = spec.params.grid.times();
    let mut density_checks = Vec::with_capacity(sweeps.len() * DENSITY_CHECK_TIMES);
    for (policy, sweep) in spec.family.policies().iter().zip(&sweeps) {
        for (j, &(mean, se)) in sweep.d_checks.iter().enumerate() {
            let pass = (mean - 1.0).abs() <= 3.0 * se + 1e-12;
            density_checks.push(DensityCheck {
                policy: policy.label().to_string(),
                t: times[check_idx[j]],
                mean,
                std_error: se,
                pass,
            });
        }
    }

    let qv_excess: Vec<(String, Vec<f64>)> = spec
        .family
        .policies()
        .iter()
        .zip(&sweeps)
        .map(|(p, s)| (p.label().to_string(), s.qv_excess_fraction.clone()))
        .collect();

    let overall_pass =
        functionals.iter().all(|f| f.pass) && density_checks.iter().all(|c| c.pass);
    Ok(GirsanovReport {
        novikov,
        functionals,
        density_checks,
        qv_excess,
        pde_tolerance,
        overall_pass,
    })
}
