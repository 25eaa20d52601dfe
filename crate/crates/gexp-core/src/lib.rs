//! Numerical engine for sublinear expectations under volatility
//! uncertainty (G-expectations) and their Brownian motion.
//!
//! Two independent backends evaluate E[φ(B_{t₁}, …, B_{t_k})] for a
//! G-Brownian motion whose volatility ranges over an uncertainty set Θ:
//!
//! * [`gheat`] / [`expectation`] — a monotone finite-difference solver for
//!   the nonlinear heat equation ∂u/∂t = G(D²u), chained backwards over
//!   the evaluation times;
//! * [`montecarlo`] — simulation of the controlled martingales ∫θ dW and
//!   maximization over finite control families (the upper-expectation
//!   picture), with common random numbers.
//!
//! On top of both, [`stochcalc`] computes discrete Itô integrals,
//! quadratic variation, and the exponential change-of-measure density, and
//! [`girsanov`] runs the drift-removal experiment: reweighting by the
//! density D and recentering B into B̂ reproduces the original
//! G-expectation — checked functional by functional, with the Novikov-type
//! integrability condition verified first.
//!
//! [`model`] holds the shared vocabulary: uncertainty sets, time grids,
//! path bundles, control policies, and cylinder functionals.

pub mod config;
pub mod error;
pub mod expectation;
pub mod gheat;
pub mod girsanov;
pub mod model;
pub mod montecarlo;
pub mod report;
pub mod runner;
pub mod stochcalc;
pub mod numerics;

pub use error::{GexpError, Result};
