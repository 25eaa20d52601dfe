//! Strict JSON run configuration shared by the CLI binary and the C ABI.
//!
//! One schema covers every experiment. It is strict twice over: unknown
//! fields fail parsing (so a typo never silently becomes a default), and
//! known fields that the chosen experiment does not read fail validation
//! (so a config never claims more than the run uses). Validation happens
//! before any computation is dispatched, and the canonical serialization
//! of the parsed config is hashed into every report, tying each number
//! back to its exact inputs.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GexpError, Result};
use crate::expectation::BackwardRecursionPlan;
use crate::gheat::{build_pde_guide, SolverParams};
use crate::model::{
    BuiltinFunctional, ControlPolicy, CylinderFunctional, ScalarPayoff, ThetaSet, ThetaSetSpec,
    TimeGrid,
};
use crate::montecarlo::{ControlFamily, PathEvent};
use crate::stochcalc::Integrand;

/// Salt mixed into the run seed when a random-schedule family does not
/// declare its own seed, so schedule noise and path noise never share a
/// stream.
const SCHEDULE_SEED_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

// ---------------------------------------------------------------------------
// Experiment kinds
// ---------------------------------------------------------------------------

/// Which experiment a config drives; mirrored one-to-one by the CLI
/// subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Solve the nonlinear heat equation for each battery payoff and
    /// report the value at the origin (plot-ready final slice on demand).
    Gheat,
    /// G-expectations of the battery by the PDE backward recursion.
    Expect,
    /// Upper expectations by controlled Monte Carlo over a policy family.
    Mc,
    /// Capacity (upper probability) of a path event.
    Capacity,
    /// Girsanov verification: weighted transformed expectations against
    /// the plain law, density-martingale and quadratic-variation checks
    /// included.
    Girsanov,
    /// Exponential-moment (Novikov-type) integrability check.
    Novikov,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::Gheat => "gheat",
            ExperimentKind::Expect => "expect",
            ExperimentKind::Mc => "mc",
            ExperimentKind::Capacity => "capacity",
            ExperimentKind::Girsanov => "girsanov",
            ExperimentKind::Novikov => "novikov",
        })
    }
}

// ---------------------------------------------------------------------------
// Battery functionals
// ---------------------------------------------------------------------------

/// One battery entry: a named payoff applied to the path at one or two
/// times — to the level, to the increment between the times, or as the
/// product of one coordinate at both times.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    /// φ(B_t).
    Level { payoff: ScalarPayoff, time: f64 },
    /// φ(B_{t₂} − B_{t₁}).
    Increment { payoff: ScalarPayoff, times: [f64; 2] },
    /// B^c_{t₁} · B^c_{t₂}.
    Product {
        #[serde(default)]
        coord: usize,
        times: [f64; 2],
    },
}

impl FunctionalSpec {
    /// Latest evaluation time, for domain sizing.
    pub fn last_time(&self) -> f64 {
        match self {
            FunctionalSpec::Level { time, .. } => *time,
            FunctionalSpec::Increment { times, .. } | FunctionalSpec::Product { times, .. } => {
                times[0].max(times[1])
            }
        }
    }

    fn is_single_time(&self) -> bool {
        matches!(self, FunctionalSpec::Level { .. })
    }

    /// Builds the runtime functional. `radius` declares the truncated
    /// state-space ball relative to which growing payoffs state their
    /// Lipschitz constant and bound.
    pub fn build(&self, dim: usize, radius: f64) -> Result<CylinderFunctional> {
        match self.clone() {
            FunctionalSpec::Level { payoff, time } => CylinderFunctional::builtin(
                dim,
                vec![time],
                BuiltinFunctional::Single(payoff),
                radius,
            ),
            FunctionalSpec::Increment { payoff, times } => CylinderFunctional::builtin(
                dim,
                times.to_vec(),
                BuiltinFunctional::Increment(payoff),
                radius,
            ),
            FunctionalSpec::Product { coord, times } => CylinderFunctional::builtin(
                dim,
                times.to_vec(),
                BuiltinFunctional::Product { coord },
                radius,
            ),
        }
    }
}

// ---------------------------------------------------------------------------
// Control families
// ---------------------------------------------------------------------------

/// Recipe for the finite control family the Monte Carlo backend maximizes
/// over.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// One constant policy per extreme member of the uncertainty set.
    Constants,
    /// Every block-wise extreme schedule with the given number of equal
    /// time blocks (membersᵇˡᵒᶜᵏˢ policies, capped).
    BangBang { blocks: usize },
    /// Independently drawn uncertainty-set-valued schedules.
    Random {
        count: usize,
        /// Schedule-noise seed; defaults to the run seed xor a fixed salt.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Extreme constants plus one table-guided policy per single-time
    /// battery functional, the table recording the PDE argmax member at
    /// each (step, state) cell.
    PdeGuided,
    /// Union of sub-recipes over the same grid and uncertainty set.
    Union { parts: Vec<FamilySpec> },
}

fn build_family(
    spec: &FamilySpec,
    theta: &ThetaSet,
    grid: &TimeGrid,
    battery: &[CylinderFunctional],
    solver: &SolverParams,
    run_seed: u64,
) -> Result<ControlFamily> {
    match spec {
        FamilySpec::Constants => ControlFamily::constants(theta, grid.clone()),
        FamilySpec::BangBang { blocks } => ControlFamily::bang_bang(theta, grid.clone(), *blocks),
        FamilySpec::Random { count, seed } => ControlFamily::random_schedules(
            theta,
            grid.clone(),
            *count,
            seed.unwrap_or(run_seed ^ SCHEDULE_SEED_SALT),
        ),
        FamilySpec::PdeGuided => {
            let mut family = ControlFamily::constants(theta, grid.clone())?;
            let mut guided = 0usize;
            for f in battery.iter().filter(|f| f.k() == 1) {
                let table = build_pde_guide(theta, f, grid, solver)?;
                family = family.with_policy(ControlPolicy::PdeGuided {
                    guide: Arc::new(table),
                    label: format!("guided[{}]", f.label()),
                })?;
                guided += 1;
            }
            if guided == 0 {
                log::warn!(
                    "pde_guided family: the battery has no single-time functionals; \
                     using the extreme constants alone"
                );
            }
            Ok(family)
        }
        FamilySpec::Union { parts } => {
            let mut iter = parts.iter();
            let first = iter.next().ok_or_else(|| {
                GexpError::Config("family union needs at least one part".to_string())
            })?;
            let mut family = build_family(first, theta, grid, battery, solver, run_seed)?;
            for part in iter {
                family =
                    family.merged(build_family(part, theta, grid, battery, solver, run_seed)?)?;
            }
            Ok(family)
        }
    }
}

// ---------------------------------------------------------------------------
// Integrands
// ---------------------------------------------------------------------------

/// Girsanov integrand recipe. Only constant (and zero) integrands have a
/// JSON form; state-dependent integrands exist in the API but carry
/// closures, and the config layer deliberately embeds no expression
/// language.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntegrandSpec {
    /// h(t, x) ≡ h, one component per dimension.
    Constant { h: Vec<f64> },
    /// h ≡ 0: the identity transform.
    Zero,
}

impl IntegrandSpec {
    pub fn build(&self, dim: usize) -> Result<Integrand> {
        match self {
            IntegrandSpec::Constant { h } => {
                if h.len() != dim {
                    return Err(GexpError::Config(format!(
                        "integrand has {} components but the uncertainty set has dimension {dim}",
                        h.len()
                    )));
                }
                Integrand::constant(h.clone())
            }
            IntegrandSpec::Zero => Integrand::zero(dim),
        }
    }
}

// ---------------------------------------------------------------------------
// Solver overrides and tolerances
// ---------------------------------------------------------------------------

/// Optional overrides for the PDE backend; missing fields keep the
/// dimension-dependent defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfl_safety: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_tolerance: Option<f64>,
}

impl SolverSpec {
    /// Backward-recursion plan with the overrides applied.
    pub fn plan(&self, dim: usize) -> BackwardRecursionPlan {
        let mut plan = BackwardRecursionPlan::default_for_dim(dim);
        if let Some(n) = self.n_nodes {
            plan.n_nodes = n;
        }
        if let Some(w) = self.half_width {
            plan.half_width = Some(w);
        }
        if let Some(c) = self.cfl_safety {
            plan.cfl_safety = c;
        }
        if let Some(a) = self.anchor_nodes {
            plan.anchor_nodes = Some(a);
        }
        if let Some(p) = self.probe_tolerance {
            plan.probe_tolerance = p;
        }
        plan
    }

    fn validate(&self) -> Result<()> {
        if let Some(c) = self.cfl_safety {
            if !(0.0 < c && c <= 1.0) {
                return Err(GexpError::Config(format!(
                    "cfl_safety must lie in (0, 1], got {c}"
                )));
            }
        }
        if let Some(n) = self.n_nodes {
            if n < 3 || n % 2 == 0 {
                return Err(GexpError::Config(format!(
                    "n_nodes must be an odd integer >= 3, got {n}"
                )));
            }
        }
        if let Some(w) = self.half_width {
            if w.is_nan() || w <= 0.0 {
                return Err(GexpError::Config(format!(
                    "half_width must be positive, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Report tolerances with sensible defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Deterministic band added to 3·SE when a Monte Carlo estimate is
    /// compared against the PDE backend (absorbs grid truncation error).
    pub pde: f64,
    /// Relative headroom on the diffusion bound of the transformed
    /// quadratic variation.
    pub qv_margin: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            pde: 2e-3,
            qv_margin: 0.05,
        }
    }
}

impl Tolerances {
    fn validate(&self) -> Result<()> {
        if self.pde.is_nan() || self.pde <= 0.0 || self.qv_margin.is_nan() || self.qv_margin <= 0.0
        {
            return Err(GexpError::Config(format!(
                "tolerances must be positive (pde={}, qv_margin={})",
                self.pde, self.qv_margin
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The run configuration
// ---------------------------------------------------------------------------

/// A complete run request: the experiment kind plus every section it
/// needs. See the module docs for the double strictness contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub theta: ThetaSetSpec,
    /// Simulation grid (path-based experiments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<TimeGrid>,
    /// Monte Carlo path count (path-based experiments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    /// Root seed for every random stream of the run.
    #[serde(default)]
    pub seed: u64,
    /// Functional battery (everything except capacity and novikov).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub battery: Vec<FunctionalSpec>,
    /// Control family recipe (path-based experiments only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySpec>,
    /// Girsanov integrand (girsanov and novikov only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrand: Option<IntegrandSpec>,
    /// Path event (capacity only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<PathEvent>,
    /// Integrability exponent ε > 0 (required for novikov, optional for
    /// girsanov where it defaults to 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// PDE backend overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl RunConfig {
    /// Parses a JSON config and validates it. Parse errors keep serde's
    /// diagnostics (line/column position, the name of an unknown field).
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| GexpError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical serialization of the parsed config.
    /// Two configs hash equal exactly when every effective field agrees.
    pub fn sha256(&self) -> String {
        let canon = serde_json::to_vec(self).expect("a parsed config always serializes");
        let digest = Sha256::digest(&canon);
        let mut out = String::with_capacity(64);
        for byte in digest {
            use fmt::Write;
            write!(out, "{byte:02x}").expect("writing to a string cannot fail");
        }
        out
    }

    /// Checks the section matrix and the cheap value constraints. Deep
    /// constraints (CFL, payoff coordinates, family caps, nondegeneracy)
    /// are enforced by the builders below, which run before any
    /// computation is dispatched.
    pub fn validate(&self) -> Result<()> {
        use ExperimentKind::*;
        let kind = self.experiment;
        let needs_battery = matches!(kind, Gheat | Expect | Mc | Girsanov);
        let needs_paths = matches!(kind, Mc | Capacity | Girsanov | Novikov);
        let needs_grid = needs_paths;
        let needs_family = needs_paths;
        let needs_integrand = matches!(kind, Girsanov | Novikov);
        let allows_epsilon = needs_integrand;
        let allows_solver = matches!(kind, Gheat | Expect | Mc | Girsanov);

        if needs_battery && self.battery.is_empty() {
            return Err(GexpError::Config("battery must be nonempty".to_string()));
        }
        if !needs_battery && !self.battery.is_empty() {
            return Err(self.unused_section("battery"));
        }
        self.section("grid", self.grid.is_some(), needs_grid)?;
        self.section("paths", self.paths.is_some(), needs_paths)?;
        self.section("family", self.family.is_some(), needs_family)?;
        self.section("integrand", self.integrand.is_some(), needs_integrand)?;
        self.section("event", self.event.is_some(), kind == Capacity)?;
        if kind == Novikov && self.epsilon.is_none() {
            return Err(self.missing_section("epsilon"));
        }
        if !allows_epsilon && self.epsilon.is_some() {
            return Err(self.unused_section("epsilon"));
        }
        if !allows_solver && self.solver.is_some() {
            return Err(self.unused_section("solver"));
        }

        if kind == Gheat {
            if let Some(multi) = self.battery.iter().find(|f| !f.is_single_time()) {
                return Err(GexpError::Config(format!(
                    "gheat solves single-time functionals only (got a {} entry); \
                     use `expect` for multi-time batteries",
                    match multi {
                        FunctionalSpec::Increment { .. } => "increment",
                        FunctionalSpec::Product { .. } => "product",
                        FunctionalSpec::Level { .. } => unreachable!(),
                    }
                )));
            }
        }

        if let Some(p) = self.paths {
            if p == 0 {
                return Err(GexpError::Config("paths must be positive".to_string()));
            }
        }
        if let Some(e) = self.epsilon {
            if !e.is_finite() || e <= 0.0 {
                return Err(GexpError::Config(format!(
                    "epsilon must be positive and finite, got {e}"
                )));
            }
        }
        for f in &self.battery {
            let last = f.last_time();
            if last.is_nan() || last <= 0.0 {
                return Err(GexpError::Config(
                    "battery evaluation times must be positive".to_string(),
                ));
            }
        }
        if let Some(s) = &self.solver {
            s.validate()?;
        }
        self.tolerances.validate()?;
        Ok(())
    }

    fn section(&self, field: &str, present: bool, needed: bool) -> Result<()> {
        match (present, needed) {
            (false, true) => Err(self.missing_section(field)),
            (true, false) => Err(self.unused_section(field)),
            _ => Ok(()),
        }
    }

    fn missing_section(&self, field: &str) -> GexpError {
        GexpError::Config(format!(
            "experiment `{}` requires the `{field}` section",
            self.experiment
        ))
    }

    fn unused_section(&self, field: &str) -> GexpError {
        GexpError::Config(format!(
            "field `{field}` is not used by experiment `{}`; remove it (strict schema)",
            self.experiment
        ))
    }

    // --- builders ----------------------------------------------------------

    pub fn build_theta(&self) -> Result<ThetaSet> {
        ThetaSet::try_from(self.theta.clone())
    }

    pub fn build_grid(&self) -> Result<TimeGrid> {
        self.grid
            .clone()
            .ok_or_else(|| self.missing_section("grid"))
    }

    pub fn build_paths(&self) -> Result<usize> {
        self.paths.ok_or_else(|| self.missing_section("paths"))
    }

    /// State-space radius relative to which growing payoffs declare their
    /// constants: the PDE backend's truncation box at the latest relevant
    /// time.
    pub fn payoff_radius(&self, theta: &ThetaSet) -> f64 {
        let horizon = self
            .battery
            .iter()
            .map(FunctionalSpec::last_time)
            .chain(self.grid.as_ref().map(TimeGrid::horizon))
            .fold(0.0_f64, f64::max);
        crate::gheat::DOMAIN_MARGIN_SIGMAS * theta.sigma_max_sq().sqrt() * horizon.sqrt()
    }

    pub fn build_battery(&self, theta: &ThetaSet) -> Result<Vec<CylinderFunctional>> {
        let radius = self.payoff_radius(theta);
        self.battery
            .iter()
            .map(|s| s.build(theta.dim(), radius))
            .collect()
    }

    /// Builds the control family; `battery` feeds the PDE-guided recipe.
    pub fn build_family(
        &self,
        theta: &ThetaSet,
        grid: &TimeGrid,
        battery: &[CylinderFunctional],
    ) -> Result<ControlFamily> {
        let spec = self
            .family
            .as_ref()
            .ok_or_else(|| self.missing_section("family"))?;
        let solver = self.solver_params(theta.dim());
        build_family(spec, theta, grid, battery, &solver, self.seed)
    }

    pub fn build_integrand(&self, dim: usize) -> Result<Integrand> {
        self.integrand
            .as_ref()
            .ok_or_else(|| self.missing_section("integrand"))?
            .build(dim)
    }

    pub fn build_event(&self) -> Result<PathEvent> {
        self.event
            .clone()
            .ok_or_else(|| self.missing_section("event"))
    }

    /// ε for the integrability check (girsanov defaults to 1).
    pub fn epsilon_or_default(&self) -> f64 {
        self.epsilon.unwrap_or(1.0)
    }

    pub fn plan(&self, dim: usize) -> BackwardRecursionPlan {
        self.solver.clone().unwrap_or_default().plan(dim)
    }

    fn solver_params(&self, dim: usize) -> SolverParams {
        let plan = self.plan(dim);
        SolverParams {
            n_nodes: plan.n_nodes,
            half_width: plan.half_width,
            cfl_safety: plan.cfl_safety,
        }
    }
}
