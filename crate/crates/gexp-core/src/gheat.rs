//! Monotone explicit finite-difference solver for the nonlinear heat
//! equation ∂u/∂t − G(D²u) = 0 with Cauchy data φ, in dimensions 1 and 2.
//!
//! `u(t, 0)` is the sublinear expectation of φ at horizon t, which makes
//! this solver the reference backend the Monte Carlo side is checked
//! against. The scheme is the explicit monotone Euler update
//!
//! ```text
//! u^{m+1}_i = u^m_i + dt · G(D²_h u^m)_i
//! ```
//!
//! with centered second differences and, in 2D, the 4-point centered cross
//! stencil for the mixed derivative. Explicit time stepping keeps
//! monotonicity (and with it the discrete comparison principle) trivially,
//! at the price of the stability bound dt ≤ h²/(2·d·σ_max²), which is
//! validated before stepping.
//!
//! The equation is posed on all of ℝ^d; we truncate to [−L, L]^d with
//! L = 6·σ_max·√T by default. Ghost nodes take the one-sided linear
//! extrapolation of the two nearest interior values, so the second
//! difference normal to a face is exactly zero there: the far field evolves
//! as if the data were affine, which for bounded-Lipschitz data is correct
//! up to a boundary pollution of order exp(−L²/(2σ_max²T)) ≈ 1e−8 at the
//! default margin — far below the Monte Carlo noise floor.

use nalgebra::DMatrix;

use crate::error::{GexpError, Result};
use crate::model::{gamma_gamma_t, CylinderFunctional, ThetaKind, ThetaSet, TimeGrid};

/// Default truncation margin: L = `DOMAIN_MARGIN_SIGMAS`·σ_max·√T.
pub const DOMAIN_MARGIN_SIGMAS: f64 = 6.0;

// ---------------------------------------------------------------------------
// Spatial grid and grid functions
// ---------------------------------------------------------------------------

/// Uniform tensor grid on [−L, L]^dim with an odd number of nodes per axis,
/// so that the origin is exactly a node.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    dim: usize,
    half_width: f64,
    n_nodes: usize,
}

impl SpatialGrid {
    pub fn new(dim: usize, half_width: f64, n_nodes: usize) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(GexpError::InvalidInput(format!(
                "supported grid dimensions are 1 and 2, got {dim}"
            )));
        }
        if !half_width.is_finite() || half_width <= 0.0 {
            return Err(GexpError::InvalidInput(format!(
                "grid half-width must be positive, got {half_width}"
            )));
        }
        if n_nodes < 3 || n_nodes.is_multiple_of(2) {
            return Err(GexpError::InvalidInput(format!(
                "nodes per axis must be an odd integer >= 3, got {n_nodes}"
            )));
        }
        Ok(Self {
            dim,
            half_width,
            n_nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Spacing h = 2L/(n−1).
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.n_nodes - 1) as f64
    }

    /// Total number of nodes (n^dim).
    pub fn total_nodes(&self) -> usize {
        self.n_nodes.pow(self.dim as u32)
    }

    /// Coordinate of node `ix` along one axis; the center node maps to
    /// exactly 0.0.
    pub fn coord(&self, ix: usize) -> f64 {
        let n1 = (self.n_nodes - 1) as f64;
        self.half_width * (2.0 * ix as f64 - n1) / n1
    }

    /// Index of the center node along one axis.
    pub fn center(&self) -> usize {
        (self.n_nodes - 1) / 2
    }

    /// Flat index of a 2D node (row-major in the x index).
    pub fn idx2(&self, ix: usize, iy: usize) -> usize {
        ix * self.n_nodes + iy
    }

    /// Nearest node index along one axis for a coordinate, clamped to the
    /// grid.
    pub fn nearest(&self, x: f64) -> usize {
        let t = (x + self.half_width) / self.spacing();
        (t.round().max(0.0) as usize).min(self.n_nodes - 1)
    }
}

/// Samples of a value function u(t, ·) on a [`SpatialGrid`].
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: SpatialGrid,
    t: f64,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: SpatialGrid, t: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.total_nodes() {
            return Err(GexpError::InvalidInput(format!(
                "grid function needs {} values, got {}",
                grid.total_nodes(),
                values.len()
            )));
        }
        Ok(Self { grid, t, values })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at the origin (always a node).
    pub fn at_origin(&self) -> f64 {
        let c = self.grid.center();
        match self.grid.dim() {
            1 => self.values[c],
            _ => self.values[self.grid.idx2(c, c)],
        }
    }
}

/// Multilinear interpolation of grid values at a point inside the domain.
///
/// Exact on functions that are affine per axis. Points outside
/// [−L, L]^dim (beyond a 1e−12 relative slack) are rejected.
pub fn evaluate_at(u: &GridFunction, x: &[f64]) -> Result<f64> {
    let grid = &u.grid;
    if x.len() != grid.dim() {
        return Err(GexpError::InvalidInput(format!(
            "point dimension {} does not match grid dimension {}",
            x.len(),
            grid.dim()
        )));
    }
    let slack = 1e-12 * grid.half_width().max(1.0);
    if x.iter().any(|&xi| xi.abs() > grid.half_width() + slack) {
        return Err(GexpError::OutOfDomain {
            point: x.to_vec(),
            half_width: grid.half_width(),
            dim: grid.dim(),
        });
    }
    let h = grid.spacing();
    let n = grid.n_nodes();
    // Per-axis cell index and offset in [0, 1].
    let locate = |xi: f64| -> (usize, f64) {
        let t = (xi + grid.half_width()) / h;
        let i = (t.floor().max(0.0) as usize).min(n - 2);
        (i, t - i as f64)
    };
    match grid.dim() {
        1 => {
            let (i, s) = locate(x[0]);
            Ok(u.values[i] * (1.0 - s) + u.values[i + 1] * s)
        }
        _ => {
            let (i, s) = locate(x[0]);
            let (j, r) = locate(x[1]);
            let v00 = u.values[grid.idx2(i, j)];
            let v01 = u.values[grid.idx2(i, j + 1)];
            let v10 = u.values[grid.idx2(i + 1, j)];
            let v11 = u.values[grid.idx2(i + 1, j + 1)];
            Ok(v00 * (1.0 - s) * (1.0 - r) + v01 * (1.0 - s) * r + v10 * s * (1.0 - r) + v11 * s * r)
        }
    }
}

// ---------------------------------------------------------------------------
// The generator kernel
// ---------------------------------------------------------------------------

/// Precomputed evaluation of G on discrete Hessians, specialized per
/// uncertainty-set representation so the per-node inner loop allocates
/// nothing.
enum GKernel {
    /// 1D interval: G([a]) = ½(σ_high²·a⁺ − σ_low²·a⁻).
    Interval { lo2: f64, hi2: f64 },
    /// 1D members: ½·(γγᵀ)₀₀ per member.
    One(Vec<f64>),
    /// 2D members: (γγᵀ)₀₀, (γγᵀ)₀₁, (γγᵀ)₁₁ per member.
    Two(Vec<(f64, f64, f64)>),
}

impl GKernel {
    fn build(theta: &ThetaSet) -> GKernel {
        match (theta.dim(), theta.kind()) {
            (1, ThetaKind::Interval1d {
                sigma_low,
                sigma_high,
            }) => GKernel::Interval {
                lo2: sigma_low * sigma_low,
                hi2: sigma_high * sigma_high,
            },
            (1, _) => GKernel::One(
                theta
                    .extreme_members()
                    .iter()
                    .map(|m| gamma_gamma_t(m)[(0, 0)])
                    .collect(),
            ),
            (_, _) => GKernel::Two(
                theta
                    .extreme_members()
                    .iter()
                    .map(|m| {
                        let gg = gamma_gamma_t(m);
                        (gg[(0, 0)], gg[(0, 1)], gg[(1, 1)])
                    })
                    .collect(),
            ),
        }
    }

    #[inline]
    fn eval1(&self, uxx: f64) -> f64 {
        match self {
            GKernel::Interval { lo2, hi2 } => 0.5 * (hi2 * uxx.max(0.0) - lo2 * (-uxx).max(0.0)),
            GKernel::One(gg) => gg
                .iter()
                .map(|g| 0.5 * g * uxx)
                .fold(f64::NEG_INFINITY, f64::max),
            GKernel::Two(_) => unreachable!("1D kernel applied to 2D set"),
        }
    }

    #[inline]
    fn eval2(&self, uxx: f64, uxy: f64, uyy: f64) -> f64 {
        match self {
            GKernel::Two(ggs) => ggs
                .iter()
                .map(|(g00, g01, g11)| 0.5 * (g00 * uxx + g11 * uyy) + g01 * uxy)
                .fold(f64::NEG_INFINITY, f64::max),
            _ => unreachable!("2D kernel applied to 1D set"),
        }
    }

    /// Index of the member attaining the supremum (for guide tables);
    /// ties keep the lowest index, and the interval picks the high
    /// endpoint at zero curvature, matching `argmax_gamma`.
    #[inline]
    fn argmax1(&self, uxx: f64) -> usize {
        match self {
            GKernel::Interval { .. } => usize::from(uxx >= 0.0),
            GKernel::One(gg) => {
                let mut best = 0;
                let mut bv = 0.5 * gg[0] * uxx;
                for (i, g) in gg.iter().enumerate().skip(1) {
                    let v = 0.5 * g * uxx;
                    if v > bv {
                        best = i;
                        bv = v;
                    }
                }
                best
            }
            GKernel::Two(_) => unreachable!(),
        }
    }

    #[inline]
    fn argmax2(&self, uxx: f64, uxy: f64, uyy: f64) -> usize {
        match self {
            GKernel::Two(ggs) => {
                let mut best = 0;
                let mut bv = f64::NEG_INFINITY;
                for (i, (g00, g01, g11)) in ggs.iter().enumerate() {
                    let v = 0.5 * (g00 * uxx + g11 * uyy) + g01 * uxy;
                    if v > bv {
                        best = i;
                        bv = v;
                    }
                }
                best
            }
            _ => unreachable!(),
        }
    }
}

/// Largest admissible time step for the explicit scheme on this grid.
pub fn cfl_bound(theta: &ThetaSet, grid: &SpatialGrid) -> f64 {
    let h = grid.spacing();
    h * h / (2.0 * grid.dim() as f64 * theta.sigma_max_sq())
}

/// Rejects 2D sets whose members have off-diagonally dominant γγᵀ: the
/// centered cross stencil for the mixed derivative needs
/// (γγᵀ)_ii ≥ Σ_{j≠i} |(γγᵀ)_ij| to keep its negative corner weights
/// controlled by the axis terms.
fn check_diagonal_dominance(theta: &ThetaSet) -> Result<()> {
    if theta.dim() < 2 {
        return Ok(());
    }
    for m in theta.extreme_members() {
        let gg = gamma_gamma_t(&m);
        for i in 0..theta.dim() {
            let off: f64 = (0..theta.dim())
                .filter(|&j| j != i)
                .map(|j| gg[(i, j)].abs())
                .sum();
            if gg[(i, i)] < off - 1e-12 {
                return Err(GexpError::Config(format!(
                    "uncertainty-set member is not diagonally dominant in gamma*gamma^T \
                     (row {i}: diagonal {} < off-diagonal sum {off}); \
                     the cross stencil would lose monotonicity",
                    gg[(i, i)]
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// The solver
// ---------------------------------------------------------------------------

/// Grid-resolution choices for a solve; the grid itself is derived from the
/// uncertainty set and the horizon.
#[derive(Debug, Clone)]
pub struct SolverParams {
    /// Nodes per axis (odd). Defaults: 601 in 1D, 241 in 2D.
    pub n_nodes: usize,
    /// Domain half-width; `None` derives L = 6·σ_max·√horizon.
    pub half_width: Option<f64>,
    /// Fraction of the CFL bound actually used as dt (in (0, 1]).
    pub cfl_safety: f64,
}

impl SolverParams {
    pub fn default_for_dim(dim: usize) -> Self {
        SolverParams {
            n_nodes: if dim == 1 { 601 } else { 241 },
            half_width: None,
            cfl_safety: 0.9,
        }
    }

    /// Builds the truncated grid for a problem with the given total
    /// horizon (the largest evaluation time of the functional, so that
    /// multi-stage recursions can reuse one grid for every stage).
    pub fn resolve_grid(&self, theta: &ThetaSet, horizon: f64) -> Result<SpatialGrid> {
        if !(0.0 < self.cfl_safety && self.cfl_safety <= 1.0) {
            return Err(GexpError::Config(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        let l = match self.half_width {
            Some(l) => l,
            None => DOMAIN_MARGIN_SIGMAS * theta.sigma_max_sq().sqrt() * horizon.sqrt(),
        };
        SpatialGrid::new(theta.dim(), l, self.n_nodes)
    }

    /// Time step derived from the CFL bound and the safety factor.
    pub fn dt(&self, theta: &ThetaSet, grid: &SpatialGrid) -> f64 {
        self.cfl_safety * cfl_bound(theta, grid)
    }
}

/// Solves ∂u/∂t = G(D²u) from nodal initial data, reporting intermediate
/// states at the requested times through `on_snapshot(t, values)`.
///
/// `dt_target` is an upper bound on the step: the solver takes
/// `ceil(t_final/dt_target)` equal steps. The CFL bound is validated on the
/// actual step; violating it is a configuration error, not a warning,
/// because the scheme's monotonicity (and with it every comparison-based
/// guarantee) would silently break.
pub fn solve_gheat_from_data(
    theta: &ThetaSet,
    grid: &SpatialGrid,
    initial: Vec<f64>,
    t_final: f64,
    dt_target: f64,
    snapshot_times: &[f64],
    mut on_snapshot: impl FnMut(f64, &[f64]),
) -> Result<GridFunction> {
    if grid.dim() != theta.dim() {
        return Err(GexpError::InvalidInput(format!(
            "grid dimension {} does not match uncertainty set dimension {}",
            grid.dim(),
            theta.dim()
        )));
    }
    if initial.len() != grid.total_nodes() {
        return Err(GexpError::InvalidInput(format!(
            "initial data has {} values, grid has {} nodes",
            initial.len(),
            grid.total_nodes()
        )));
    }
    if !t_final.is_finite() || t_final <= 0.0 {
        return Err(GexpError::InvalidInput(format!(
            "final time must be positive, got {t_final}"
        )));
    }
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(GexpError::NumericalBlowup { step: 0 });
    }
    check_diagonal_dominance(theta)?;
    debug_assert!(snapshot_times.windows(2).all(|w| w[0] <= w[1]));

    let n_steps = (t_final / dt_target).ceil().max(1.0) as usize;
    let dt = t_final / n_steps as f64;
    let bound = cfl_bound(theta, grid);
    if dt > bound * (1.0 + 1e-12) {
        return Err(GexpError::CflViolated {
            dt,
            bound,
            h: grid.spacing(),
            sigma_max_sq: theta.sigma_max_sq(),
            dim: grid.dim(),
        });
    }

    let kernel = GKernel::build(theta);
    let mut u = initial;
    let mut next = u.clone();
    let mut snap_iter = snapshot_times.iter().peekable();
    let snap_tol = 1e-9 * t_final;

    for m in 0..n_steps {
        match grid.dim() {
            1 => step_1d(&kernel, grid, &u, &mut next, dt),
            _ => step_2d(&kernel, grid, &u, &mut next, dt),
        }
        std::mem::swap(&mut u, &mut next);
        let t_now = (m + 1) as f64 * dt;
        // Fire every snapshot target reached by this step (first state at
        // or past the target).
        while let Some(&&target) = snap_iter.peek() {
            if t_now + snap_tol >= target {
                on_snapshot(t_now, &u);
                snap_iter.next();
            } else {
                break;
            }
        }
        if m % 64 == 0 && !u[grid.total_nodes() / 2].is_finite() {
            return Err(GexpError::NumericalBlowup { step: m + 1 });
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(GexpError::NumericalBlowup { step: n_steps });
    }
    GridFunction::new(grid.clone(), t_final, u)
}

/// One explicit step in 1D. Ghost values beyond each end take the
/// one-sided linear extrapolation 2u_edge − u_inner, which makes the
/// boundary second difference exactly zero: end nodes stay frozen.
fn step_1d(kernel: &GKernel, grid: &SpatialGrid, u: &[f64], next: &mut [f64], dt: f64) {
    let n = grid.n_nodes();
    let h2 = grid.spacing() * grid.spacing();
    next[0] = u[0];
    next[n - 1] = u[n - 1];
    for i in 1..n - 1 {
        let uxx = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / h2;
        next[i] = u[i] + dt * kernel.eval1(uxx);
    }
}

/// One explicit step in 2D with the centered cross stencil for the mixed
/// derivative. Boundary nodes use linearly extrapolated ghosts: the normal
/// second difference vanishes there and edges evolve tangentially only.
fn step_2d(kernel: &GKernel, grid: &SpatialGrid, u: &[f64], next: &mut [f64], dt: f64) {
    let n = grid.n_nodes();
    let h2 = grid.spacing() * grid.spacing();
    let idx = |i: usize, j: usize| i * n + j;

    // Interior sweep: branch-free loads.
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = u[idx(i, j)];
            let uxx = (u[idx(i + 1, j)] - 2.0 * c + u[idx(i - 1, j)]) / h2;
            let uyy = (u[idx(i, j + 1)] - 2.0 * c + u[idx(i, j - 1)]) / h2;
            let uxy = (u[idx(i + 1, j + 1)] - u[idx(i + 1, j - 1)] - u[idx(i - 1, j + 1)]
                + u[idx(i - 1, j - 1)])
                / (4.0 * h2);
            next[idx(i, j)] = c + dt * kernel.eval2(uxx, uxy, uyy);
        }
    }

    // Boundary ring: generic ghost-aware differences.
    let gv = |i: isize, j: isize| ghost_value(u, n, i, j);
    let mut update_edge = |i: usize, j: usize| {
        let (is, js) = (i as isize, j as isize);
        let c = u[idx(i, j)];
        let uxx = (gv(is + 1, js) - 2.0 * c + gv(is - 1, js)) / h2;
        let uyy = (gv(is, js + 1) - 2.0 * c + gv(is, js - 1)) / h2;
        let uxy =
            (gv(is + 1, js + 1) - gv(is + 1, js - 1) - gv(is - 1, js + 1) + gv(is - 1, js - 1))
                / (4.0 * h2);
        next[idx(i, j)] = c + dt * kernel.eval2(uxx, uxy, uyy);
    };
    for j in 0..n {
        update_edge(0, j);
        update_edge(n - 1, j);
    }
    for i in 1..n - 1 {
        update_edge(i, 0);
        update_edge(i, n - 1);
    }
}

/// Value at (possibly ghost) indices, extrapolating linearly one node past
/// each face; corners extrapolate in both axes sequentially.
fn ghost_value(u: &[f64], n: usize, i: isize, j: isize) -> f64 {
    let ni = n as isize;
    if i < 0 {
        return 2.0 * ghost_value(u, n, 0, j) - ghost_value(u, n, 1, j);
    }
    if i >= ni {
        return 2.0 * ghost_value(u, n, ni - 1, j) - ghost_value(u, n, ni - 2, j);
    }
    if j < 0 {
        return 2.0 * u[(i as usize) * n] - u[(i as usize) * n + 1];
    }
    if j >= ni {
        return 2.0 * u[(i as usize) * n + n - 1] - u[(i as usize) * n + n - 2];
    }
    u[(i as usize) * n + j as usize]
}

/// Solves the nonlinear heat equation with Cauchy data given by a
/// single-time cylinder functional and returns u(t_final, ·).
///
/// See [`solve_gheat_from_data`] for the meaning of `dt_target` and the
/// error contract (CFL violations are configuration errors; non-finite
/// values are numerical blow-up, unreachable under the CFL check for
/// finite data).
pub fn solve_gheat(
    theta: &ThetaSet,
    phi: &CylinderFunctional,
    grid: &SpatialGrid,
    t_final: f64,
    dt_target: f64,
) -> Result<GridFunction> {
    if phi.k() != 1 {
        return Err(GexpError::InvalidInput(format!(
            "the PDE solver takes single-time functionals; got {} evaluation times \
             (use the expectation module for the backward recursion)",
            phi.k()
        )));
    }
    if phi.dim() != grid.dim() {
        return Err(GexpError::InvalidInput(format!(
            "functional dimension {} does not match grid dimension {}",
            phi.dim(),
            grid.dim()
        )));
    }
    let initial = sample_on_grid(grid, |x| phi.eval(x));
    solve_gheat_from_data(theta, grid, initial, t_final, dt_target, &[], |_, _| {})
}

/// Samples a function of the spatial point on every grid node.
pub fn sample_on_grid(grid: &SpatialGrid, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let n = grid.n_nodes();
    match grid.dim() {
        1 => (0..n).map(|i| f(&[grid.coord(i)])).collect(),
        _ => {
            let mut out = Vec::with_capacity(n * n);
            for i in 0..n {
                let x = grid.coord(i);
                for j in 0..n {
                    out.push(f(&[x, grid.coord(j)]));
                }
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Guide tables (maximizing members along a solved value function)
// ---------------------------------------------------------------------------

/// A per-step, per-node table of the Θ-member maximizing the trace form at
/// the discrete Hessian of a solved value function. Feedback policies built
/// from this table realize (a time-discretized version of) the optimal
/// volatility control for the payoff the table was built from.
pub struct GuideTable {
    grid: SpatialGrid,
    members: Vec<DMatrix<f64>>,
    n_steps: usize,
    /// Member index per (step, node), row-major: `choice[k·nodes + node]`.
    choice: Vec<u8>,
}

impl GuideTable {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Member used on `(t_k, t_{k+1}]` for a process currently at `state`:
    /// nearest-node lookup (clamped to the domain, where the choice is
    /// immaterial because the far field is affine).
    pub fn member(&self, k: usize, state: &[f64]) -> &DMatrix<f64> {
        let node = match self.grid.dim() {
            1 => self.grid.nearest(state[0]),
            _ => self
                .grid
                .idx2(self.grid.nearest(state[0]), self.grid.nearest(state[1])),
        };
        let k = k.min(self.n_steps - 1);
        &self.members[self.choice[k * self.grid.total_nodes() + node] as usize]
    }
}

/// Builds a guide table for a single-time functional by solving its heat
/// equation once and recording, at each step of the simulation grid, the
/// member of Θ attaining G at the numerically differentiated Hessian.
///
/// The control used on `(t_k, t_{k+1}]` maximizes the value function with
/// remaining horizon τ = t₁ − t_k, so the table row for step k is taken
/// from the PDE state at internal time τ. Steps at or past the functional's
/// evaluation time (where the payoff no longer depends on the control) fall
/// back to member 0.
pub fn build_pde_guide(
    theta: &ThetaSet,
    phi: &CylinderFunctional,
    sim_grid: &TimeGrid,
    params: &SolverParams,
) -> Result<GuideTable> {
    if phi.k() != 1 {
        return Err(GexpError::InvalidInput(
            "guide tables are built from single-time functionals".to_string(),
        ));
    }
    let t1 = phi.times()[0];
    let grid = params.resolve_grid(theta, sim_grid.horizon())?;
    let dt_target = params.dt(theta, &grid);
    let kernel = GKernel::build(theta);
    let members = theta.extreme_members();
    if members.len() > u8::MAX as usize {
        return Err(GexpError::InvalidInput(
            "guide tables support at most 255 members".to_string(),
        ));
    }

    let nodes = grid.total_nodes();
    let n_sim = sim_grid.n_steps();
    let mut choice = vec![0u8; n_sim * nodes];

    // Simulation steps strictly before t1, with their remaining horizons,
    // in increasing order of τ (the order the forward PDE reaches them).
    let mut targets: Vec<(usize, f64)> = sim_grid.times()[..n_sim]
        .iter()
        .enumerate()
        .filter(|(_, &tk)| tk < t1 - 1e-12)
        .map(|(k, &tk)| (k, t1 - tk))
        .collect();
    targets.sort_by(|a, b| a.1.total_cmp(&b.1));
    let taus: Vec<f64> = targets.iter().map(|&(_, tau)| tau).collect();

    let initial = sample_on_grid(&grid, |x| phi.eval(x));
    let mut snap_idx = 0usize;
    let fill_row = |row: &mut [u8], u: &[f64]| {
        let n = grid.n_nodes();
        let h2 = grid.spacing() * grid.spacing();
        match grid.dim() {
            1 => {
                for i in 0..n {
                    let (a, b, c) = if i == 0 {
                        (u[0], u[0], u[0]) // ghost rule: zero curvature
                    } else if i == n - 1 {
                        (u[n - 1], u[n - 1], u[n - 1])
                    } else {
                        (u[i - 1], u[i], u[i + 1])
                    };
                    let uxx = (c - 2.0 * b + a) / h2;
                    row[i] = kernel.argmax1(uxx) as u8;
                }
            }
            _ => {
                let gv = |i: isize, j: isize| ghost_value(u, n, i, j);
                for i in 0..n {
                    for j in 0..n {
                        let (is, js) = (i as isize, j as isize);
                        let c = u[i * n + j];
                        let uxx = (gv(is + 1, js) - 2.0 * c + gv(is - 1, js)) / h2;
                        let uyy = (gv(is, js + 1) - 2.0 * c + gv(is, js - 1)) / h2;
                        let uxy = (gv(is + 1, js + 1) - gv(is + 1, js - 1) - gv(is - 1, js + 1)
                            + gv(is - 1, js - 1))
                            / (4.0 * h2);
                        row[i * n + j] = kernel.argmax2(uxx, uxy, uyy) as u8;
                    }
                }
            }
        }
    };

    // Row for the step closest to expiry uses the raw payoff's curvature.
    // (τ targets below one PDE step fire immediately at the first state.)
    let mut rows: Vec<(usize, Vec<u8>)> = Vec::with_capacity(targets.len());
    solve_gheat_from_data(
        theta,
        &grid,
        initial,
        t1,
        dt_target,
        &taus,
        |_tau, u| {
            let mut row = vec![0u8; nodes];
            fill_row(&mut row, u);
            rows.push((targets[snap_idx].0, row));
            snap_idx += 1;
        },
    )?;
    for (k, row) in rows {
        choice[k * nodes..(k + 1) * nodes].copy_from_slice(&row);
    }

    Ok(GuideTable {
        grid,
        members,
        n_steps: n_sim,
        choice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BuiltinFunctional, ScalarPayoff};
    use approx::assert_relative_eq;

    fn single(payoff: ScalarPayoff, dim: usize, t: f64, radius: f64) -> CylinderFunctional {
        CylinderFunctional::builtin(dim, vec![t], BuiltinFunctional::Single(payoff), radius)
            .unwrap()
    }

    fn solve_simple(
        theta: &ThetaSet,
        payoff: ScalarPayoff,
        t: f64,
        n_nodes: usize,
    ) -> GridFunction {
        let params = SolverParams {
            n_nodes,
            half_width: None,
            cfl_safety: 0.9,
        };
        let grid = params.resolve_grid(theta, t).unwrap();
        let phi = single(payoff, theta.dim(), t, grid.half_width());
        solve_gheat(theta, &phi, &grid, t, params.dt(theta, &grid)).unwrap()
    }

    #[test]
    fn classical_heat_square_payoff() {
        // With a single unit volatility, u = x^2 + t solves the equation:
        // u(0.5, 0) = 0.5. The centered stencil is exact on quadratics, so
        // the tolerance is far below the generic grid error.
        let theta = ThetaSet::singleton(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let u = solve_simple(&theta, ScalarPayoff::Square, 0.5, 201);
        assert!((u.at_origin() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn uncertain_square_picks_high_volatility() {
        // u = x^2 + sigma_high^2 t: convex data sees the upper volatility.
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let u = solve_simple(&theta, ScalarPayoff::Square, 0.75, 201);
        assert!((u.at_origin() - 0.75).abs() < 1e-3);
    }

    #[test]
    fn uncertain_neg_square_picks_low_volatility() {
        // u = -x^2 - sigma_low^2 t: concave data sees the lower volatility.
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let u = solve_simple(&theta, ScalarPayoff::NegSquare, 0.75, 201);
        assert!((u.at_origin() + 0.25 * 0.75).abs() < 1e-3);
    }

    #[test]
    fn call_value_matches_gaussian_oracle() {
        // For convex data the solution coincides with the classical heat
        // solution at sigma_high; at the origin that is
        // E[max(sigma_high Z sqrt(t), 0)] = sigma_high sqrt(t/(2 pi)).
        // 1/sqrt(2 pi) frozen from the Gauss-Hermite oracle in the
        // integration suite.
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let u = solve_simple(&theta, ScalarPayoff::Call { coord: 0, strike: 0.0 }, 1.0, 401);
        assert!((u.at_origin() - 0.398_942_280_401_432_7).abs() < 2e-3);
    }

    #[test]
    fn constants_are_preserved_exactly() {
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let grid = SpatialGrid::new(1, 3.0, 101).unwrap();
        let initial = vec![2.5; grid.total_nodes()];
        let u = solve_gheat_from_data(&theta, &grid, initial, 0.4, 1e-3, &[], |_, _| {}).unwrap();
        assert!(u.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn comparison_principle_on_ordered_data() {
        // phi1 <= phi2 pointwise implies u1 <= u2 pointwise (monotone
        // scheme under CFL).
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let u1 = solve_simple(&theta, ScalarPayoff::Call { coord: 0, strike: 0.5 }, 0.5, 201);
        let u2 = solve_simple(&theta, ScalarPayoff::Call { coord: 0, strike: 0.0 }, 0.5, 201);
        for (a, b) in u1.values().iter().zip(u2.values()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn sandwich_fixed_volatility_below_gexpectation() {
        // Every fixed gamma in Theta gives a linear heat solution dominated
        // by the nonlinear one.
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let u_g = solve_simple(&theta, ScalarPayoff::Abs { coord: 0 }, 0.5, 201);
        for sigma in [0.5, 0.75, 1.0] {
            let fixed = ThetaSet::singleton(DMatrix::from_element(1, 1, sigma)).unwrap();
            let params = SolverParams {
                n_nodes: 201,
                half_width: Some(u_g.grid().half_width()),
                cfl_safety: 0.9,
            };
            let grid = params.resolve_grid(&fixed, 0.5).unwrap();
            let phi = single(ScalarPayoff::Abs { coord: 0 }, 1, 0.5, grid.half_width());
            let u_f = solve_gheat(&fixed, &phi, &grid, 0.5, params.dt(&fixed, &grid)).unwrap();
            for (a, b) in u_f.values().iter().zip(u_g.values()) {
                assert!(*a <= b + 1e-12);
            }
        }
    }

    #[test]
    fn maximum_principle_for_bounded_data() {
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let u = solve_simple(
            &theta,
            ScalarPayoff::SmoothIndicator {
                coord: 0,
                center: 0.0,
                halfwidth: 0.5,
            },
            1.0,
            201,
        );
        assert!(u.values().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn convergence_under_refinement_on_kinked_data() {
        // The x^2 test is exact for the centered stencil, so refinement is
        // exercised on a payoff with a kink, against the closed-form value
        // sigma_high*sqrt(t/(2 pi)). dt scales with h^2 through the CFL
        // rule, halving h must cut the error by roughly 4; we assert it at
        // least halves, leaving room for the boundary-pollution floor.
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let exact = 0.398_942_280_401_432_7;
        let coarse = solve_simple(&theta, ScalarPayoff::Call { coord: 0, strike: 0.0 }, 1.0, 151);
        let fine = solve_simple(&theta, ScalarPayoff::Call { coord: 0, strike: 0.0 }, 1.0, 301);
        let e_coarse = (coarse.at_origin() - exact).abs();
        let e_fine = (fine.at_origin() - exact).abs();
        assert!(
            e_fine < 0.5 * e_coarse,
            "refinement did not reduce the error: {e_coarse} -> {e_fine}"
        );
    }

    #[test]
    fn square_payoff_is_exact_up_to_roundoff() {
        // Quadratic data is reproduced exactly by centered differences;
        // only roundoff and the (frozen) boundary nodes remain, and the
        // boundary influence cannot reach the center in the CFL-bounded
        // number of steps... it can, but is damped below 1e-9.
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let u = solve_simple(&theta, ScalarPayoff::Square, 1.0, 301);
        assert!((u.at_origin() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let grid = SpatialGrid::new(1, 3.0, 101).unwrap();
        let initial = vec![0.0; grid.total_nodes()];
        let bound = cfl_bound(&theta, &grid);
        let err = solve_gheat_from_data(&theta, &grid, initial, 10.0 * bound, 10.0 * bound, &[], |_, _| {});
        assert!(matches!(err, Err(GexpError::CflViolated { .. })));
    }

    #[test]
    fn two_dimensional_square_matches_trace_supremum() {
        // FiniteSet {diag(0.5,1), diag(1,0.5)}: both members give
        // tr(gamma gamma^T) = 1.25, so u(T,0) = 1.25 T for |x|^2.
        let theta = ThetaSet::finite_set(vec![
            DMatrix::from_partial_diagonal(2, 2, &[0.5, 1.0]),
            DMatrix::from_partial_diagonal(2, 2, &[1.0, 0.5]),
        ])
        .unwrap();
        let u = solve_simple(&theta, ScalarPayoff::Square, 0.5, 121);
        assert!((u.at_origin() - 1.25 * 0.5).abs() < 2e-3);
    }

    #[test]
    fn two_dimensional_mixed_product_stays_zero() {
        // phi = x*y has Hessian [[0,1],[1,0]]; for diagonal members the
        // trace form vanishes, so u stays x*y and the origin stays 0.
        let theta = ThetaSet::finite_set(vec![
            DMatrix::from_partial_diagonal(2, 2, &[0.5, 1.0]),
            DMatrix::from_partial_diagonal(2, 2, &[1.0, 0.5]),
        ])
        .unwrap();
        let params = SolverParams {
            n_nodes: 81,
            half_width: None,
            cfl_safety: 0.9,
        };
        let grid = params.resolve_grid(&theta, 0.5).unwrap();
        let initial = sample_on_grid(&grid, |x| x[0] * x[1]);
        let u = solve_gheat_from_data(&theta, &grid, initial, 0.5, params.dt(&theta, &grid), &[], |_, _| {})
            .unwrap();
        assert!(u.at_origin().abs() < 1e-9);
    }

    #[test]
    fn off_diagonal_dominance_is_enforced() {
        // gamma = [[1, 0.999], [0, 0.1]]: gamma gamma^T has row-0 diagonal
        // ~2 but row-1 diagonal 0.01 < |off-diagonal| ~ 0.1.
        let gamma = DMatrix::from_row_slice(2, 2, &[1.0, 0.999, 0.0, 0.1]);
        let theta = ThetaSet::finite_set(vec![gamma]).unwrap();
        let grid = SpatialGrid::new(2, 3.0, 41).unwrap();
        let initial = vec![0.0; grid.total_nodes()];
        let err = solve_gheat_from_data(&theta, &grid, initial, 0.1, 1e-4, &[], |_, _| {});
        assert!(matches!(err, Err(GexpError::Config(_))));
    }

    #[test]
    fn evaluate_at_interpolates() {
        let grid = SpatialGrid::new(1, 2.0, 5).unwrap();
        // Node values equal to coordinates: interpolation is exact on
        // linear functions.
        let values: Vec<f64> = (0..5).map(|i| grid.coord(i)).collect();
        let u = GridFunction::new(grid.clone(), 0.0, values).unwrap();
        assert_relative_eq!(evaluate_at(&u, &[0.3]).unwrap(), 0.3, epsilon = 1e-14);
        // Constant field.
        let u_const = GridFunction::new(grid.clone(), 0.0, vec![7.0; 5]).unwrap();
        assert_eq!(evaluate_at(&u_const, &[-1.234]).unwrap(), 7.0);
        // Out-of-domain rejected.
        assert!(matches!(
            evaluate_at(&u, &[2.5]),
            Err(GexpError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn evaluate_at_2d_cell_center_averages_corners() {
        let grid = SpatialGrid::new(2, 1.0, 3).unwrap();
        let mut values = vec![0.0; 9];
        values[grid.idx2(0, 0)] = 1.0;
        values[grid.idx2(0, 1)] = 2.0;
        values[grid.idx2(1, 0)] = 3.0;
        values[grid.idx2(1, 1)] = 4.0;
        let u = GridFunction::new(grid, 0.0, values).unwrap();
        assert_relative_eq!(evaluate_at(&u, &[-0.5, -0.5]).unwrap(), 2.5, epsilon = 1e-14);
    }

    #[test]
    fn guide_table_picks_high_vol_for_convex_payoff() {
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let sim = TimeGrid::uniform(1.0, 16).unwrap();
        let phi = single(ScalarPayoff::Square, 1, 1.0, 6.0);
        let params = SolverParams {
            n_nodes: 201,
            half_width: None,
            cfl_safety: 0.9,
        };
        let guide = build_pde_guide(&theta, &phi, &sim, &params).unwrap();
        // Convex payoff: the maximizer is sigma_high everywhere, at every
        // step, including away from the origin.
        for k in [0, 7, 15] {
            for x in [-2.0, 0.0, 1.5] {
                assert_eq!(guide.member(k, &[x])[(0, 0)], 1.0);
            }
        }
    }

    #[test]
    fn guide_table_splits_by_curvature_sign() {
        // Call spread: convex below the midpoint of the strikes, concave
        // above, so the guide should pick high vol left of 0 and low vol
        // right of 0 near expiry.
        let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
        let sim = TimeGrid::uniform(1.0, 32).unwrap();
        let phi = single(
            ScalarPayoff::CallSpread {
                coord: 0,
                strike_low: -0.5,
                strike_high: 0.5,
            },
            1,
            1.0,
            6.0,
        );
        let params = SolverParams {
            n_nodes: 201,
            half_width: None,
            cfl_safety: 0.9,
        };
        let guide = build_pde_guide(&theta, &phi, &sim, &params).unwrap();
        // Near expiry (last simulated step), curvature near the lower kink
        // is positive, near the upper kink negative.
        assert_eq!(guide.member(31, &[-0.5])[(0, 0)], 1.0);
        assert_eq!(guide.member(31, &[0.5])[(0, 0)], 0.5);
    }
}
