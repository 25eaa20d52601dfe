//! Cross-checks the two backends against each other and against
//! quadrature/closed-form oracles that share no code with the library.
//!
//! The frozen constants below come from the Bachelier closed forms (the
//! precision oracle for kinked payoffs) and are cross-checked against the
//! Gauss–Hermite rule in `common`; the self-check test keeps both oracles
//! honest before anything is compared against them. Quadrature is
//! spectrally accurate only on smooth integrands, so it is held to 1e-12
//! there and to the algebraic ~1e-3 level on kinks.

mod common;

use common::{normal_call, normal_put, GaussHermite};
use gexp_core::expectation::{g_expectation, BackwardRecursionPlan};
use gexp_core::model::{BuiltinFunctional, CylinderFunctional, ScalarPayoff, ThetaSet, TimeGrid};
use gexp_core::montecarlo::{upper_expectation_battery, BundleParams, ControlFamily};
use nalgebra::DMatrix;

/// E[max(Z, 0)] = 1/√(2π) for standard normal Z.
const CALL0_SIGMA1: f64 = 0.3989422804014327;
/// E[|Z|] = √(2/π).
const ABS_SIGMA1: f64 = 0.7978845608028654;
/// E[max(0.2 − Z, 0)] = 0.2·Φ(0.2) + ϕ(0.2) (Bachelier put).
const PUT02_SIGMA1: f64 = 0.5068946358632765;

fn single(payoff: ScalarPayoff, t: f64, radius: f64) -> CylinderFunctional {
    CylinderFunctional::builtin(1, vec![t], BuiltinFunctional::Single(payoff), radius).unwrap()
}

#[test]
fn gauss_hermite_oracle_matches_closed_forms() {
    let gh = GaussHermite::new(64);
    for &sigma in &[0.5, 1.0, 1.3] {
        // Smooth integrands: spectral accuracy.
        let sq = gh.normal_expectation(sigma, |x| x * x);
        assert!((sq - sigma * sigma).abs() < 1e-12, "E[(σZ)²] at σ={sigma}: {sq}");
        let quartic = gh.normal_expectation(sigma, |x| x.powi(4));
        let s4 = 3.0 * sigma.powi(4);
        assert!((quartic - s4).abs() < 1e-11 * s4, "E[(σZ)⁴] at σ={sigma}: {quartic}");
        let cosine = gh.normal_expectation(sigma, f64::cos);
        let char_fn = (-0.5 * sigma * sigma).exp();
        assert!(
            (cosine - char_fn).abs() < 1e-12,
            "E[cos(σZ)] at σ={sigma}: GH {cosine} vs e^(−σ²/2) {char_fn}"
        );
    }
    // Kinked integrands: quadrature degrades to O(1/n), which is exactly
    // why the closed forms are the frozen oracle. Check the convergence
    // structure — the error roughly halves from 64 to 128 nodes.
    let gh128 = GaussHermite::new(128);
    for (name, phi, closed) in [
        ("call(0)", (|x: f64| x.max(0.0)) as fn(f64) -> f64, CALL0_SIGMA1),
        ("put(0.2)", |x: f64| (0.2 - x).max(0.0), PUT02_SIGMA1),
        ("abs", f64::abs, ABS_SIGMA1),
    ] {
        let e64 = (gh.normal_expectation(1.0, phi) - closed).abs();
        let e128 = (gh128.normal_expectation(1.0, phi) - closed).abs();
        assert!(e64 < 1e-2, "{name}: GH-64 error {e64} too large for a kink");
        assert!(
            e128 < 0.7 * e64,
            "{name}: GH error should shrink ~1/n toward the closed form, got {e64} -> {e128}"
        );
    }
    // The frozen constants themselves.
    assert!((normal_call(1.0, 0.0) - CALL0_SIGMA1).abs() < 1e-15);
    assert!(((2.0 / std::f64::consts::PI).sqrt() - ABS_SIGMA1).abs() < 1e-15);
    assert!((normal_put(1.0, 0.2) - PUT02_SIGMA1).abs() < 1e-15);
}

#[test]
fn pde_matches_the_oracle_on_the_classical_case() {
    let theta = ThetaSet::singleton(DMatrix::from_element(1, 1, 1.0)).unwrap();
    let plan = BackwardRecursionPlan::default_for_dim(1);
    let cases: Vec<(CylinderFunctional, f64, f64)> = vec![
        (single(ScalarPayoff::Square, 1.0, 6.0), 1.0, 1e-3),
        (single(ScalarPayoff::Call { coord: 0, strike: 0.0 }, 1.0, 6.0), CALL0_SIGMA1, 2e-3),
        (single(ScalarPayoff::Abs { coord: 0 }, 1.0, 6.0), ABS_SIGMA1, 2e-3),
        (single(ScalarPayoff::Put { coord: 0, strike: 0.2 }, 1.0, 6.0), PUT02_SIGMA1, 2e-3),
    ];
    for (f, oracle, tol) in cases {
        let got = g_expectation(&theta, &f, &plan).unwrap().value;
        assert!(
            (got - oracle).abs() < tol,
            "{}: PDE {got} vs oracle {oracle}",
            f.label()
        );
    }
}

#[test]
fn pde_matches_the_oracle_on_the_uncertain_case() {
    // Convex payoffs reduce to the high constant volatility, concave to
    // the low one; both ends have classical oracles.
    let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
    let plan = BackwardRecursionPlan::default_for_dim(1);
    let cases: Vec<(CylinderFunctional, f64, f64)> = vec![
        (single(ScalarPayoff::Square, 1.0, 6.0), 1.0, 1e-3),
        (single(ScalarPayoff::NegSquare, 1.0, 6.0), -0.25, 1e-3),
        (single(ScalarPayoff::Call { coord: 0, strike: 0.0 }, 1.0, 6.0), CALL0_SIGMA1, 2e-3),
        (single(ScalarPayoff::Put { coord: 0, strike: 0.2 }, 1.0, 6.0), PUT02_SIGMA1, 2e-3),
        (single(ScalarPayoff::Abs { coord: 0 }, 1.0, 6.0), ABS_SIGMA1, 2e-3),
    ];
    for (f, oracle, tol) in cases {
        let got = g_expectation(&theta, &f, &plan).unwrap().value;
        assert!(
            (got - oracle).abs() < tol,
            "{}: PDE {got} vs oracle {oracle}",
            f.label()
        );
    }
}

#[test]
fn monte_carlo_agrees_with_the_pde_within_error_bars() {
    let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
    let grid = TimeGrid::uniform(1.0, 64).unwrap();
    let family = ControlFamily::constants(&theta, grid.clone())
        .unwrap()
        .merged(ControlFamily::bang_bang(&theta, grid.clone(), 2).unwrap())
        .unwrap();
    let params = BundleParams::new(grid, 1, 20_000, 20240811).unwrap();
    let battery = vec![
        single(ScalarPayoff::Square, 1.0, 6.0),
        single(ScalarPayoff::NegSquare, 1.0, 6.0),
        single(ScalarPayoff::Call { coord: 0, strike: 0.0 }, 1.0, 6.0),
        single(ScalarPayoff::Abs { coord: 0 }, 1.0, 6.0),
    ];
    let plan = BackwardRecursionPlan::default_for_dim(1);
    let uppers = upper_expectation_battery(&family, &battery, &params).unwrap();
    for (f, mc) in battery.iter().zip(&uppers) {
        let pde = g_expectation(&theta, f, &plan).unwrap().value;
        let gap = (mc.estimate.value - pde).abs();
        let band = 3.0 * mc.estimate.std_error + 1e-3;
        assert!(
            gap <= band,
            "{}: |MC {} − PDE {pde}| = {gap} > {band}",
            f.label(),
            mc.estimate.value
        );
    }
}

#[test]
fn increment_functionals_see_only_the_increment_law() {
    // E[(B_1 − B_{1/2})²] = σ²/2 and E[max(B_1 − B_{1/2}, 0)] scales the
    // one-time call by √(1/2): increments of the driving process are
    // stationary, so the t=1/2 increment behaves like B at horizon 1/2.
    let theta = ThetaSet::interval1d(0.5, 1.0).unwrap();
    let plan = BackwardRecursionPlan::default_for_dim(1);
    let inc_square = CylinderFunctional::builtin(
        1,
        vec![0.5, 1.0],
        BuiltinFunctional::Increment(ScalarPayoff::Square),
        6.0,
    )
    .unwrap();
    let inc_call = CylinderFunctional::builtin(
        1,
        vec![0.5, 1.0],
        BuiltinFunctional::Increment(ScalarPayoff::Call { coord: 0, strike: 0.0 }),
        6.0,
    )
    .unwrap();
    let sq = g_expectation(&theta, &inc_square, &plan).unwrap().value;
    assert!((sq - 0.5).abs() < 1e-3, "increment square: {sq}");
    let call = g_expectation(&theta, &inc_call, &plan).unwrap().value;
    let oracle = 0.5_f64.sqrt() * CALL0_SIGMA1;
    assert!((call - oracle).abs() < 2e-3, "increment call: {call} vs {oracle}");
}

#[test]
fn two_dimensional_finite_set_agrees_across_backends() {
    // Two diagonal members with swapped variances: |x|² integrates the
    // trace (identical for both members), coordinate payoffs pick the
    // member favouring their coordinate.
    let m1 = DMatrix::from_partial_diagonal(2, 2, &[0.5, 1.0]);
    let m2 = DMatrix::from_partial_diagonal(2, 2, &[1.0, 0.5]);
    let theta = ThetaSet::finite_set(vec![m1, m2]).unwrap();
    let plan = BackwardRecursionPlan {
        n_nodes: 161,
        ..BackwardRecursionPlan::default_for_dim(2)
    };
    let battery = vec![
        CylinderFunctional::builtin(
            2,
            vec![1.0],
            BuiltinFunctional::Single(ScalarPayoff::Square),
            6.0,
        )
        .unwrap(),
        CylinderFunctional::builtin(
            2,
            vec![1.0],
            BuiltinFunctional::Single(ScalarPayoff::Call { coord: 0, strike: 0.0 }),
            6.0,
        )
        .unwrap(),
        CylinderFunctional::builtin(
            2,
            vec![1.0],
            BuiltinFunctional::Single(ScalarPayoff::Abs { coord: 1 }),
            6.0,
        )
        .unwrap(),
    ];
    // tr(γγ*) = 1.25 for both members; per-coordinate suprema are the
    // σ = 1 classical values.
    let oracles = [1.25, CALL0_SIGMA1, ABS_SIGMA1];
    let tols = [6e-3, 6e-3, 6e-3];

    let grid = TimeGrid::uniform(1.0, 32).unwrap();
    let family = ControlFamily::constants(&theta, grid.clone()).unwrap();
    let params = BundleParams::new(grid, 2, 20_000, 77).unwrap();
    let uppers = upper_expectation_battery(&family, &battery, &params).unwrap();

    for ((f, oracle), (tol, mc)) in battery.iter().zip(oracles).zip(tols.iter().zip(&uppers)) {
        let pde = g_expectation(&theta, f, &plan).unwrap().value;
        assert!(
            (pde - oracle).abs() < *tol,
            "{}: PDE {pde} vs oracle {oracle}",
            f.label()
        );
        let gap = (mc.estimate.value - pde).abs();
        let band = 3.0 * mc.estimate.std_error + 1e-3;
        assert!(
            gap <= band,
            "{}: |MC {} − PDE {pde}| = {gap} > {band}",
            f.label(),
            mc.estimate.value
        );
    }
}
