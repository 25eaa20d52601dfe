//! Shared oracles for the integration suites, deliberately independent of
//! the library's own numerics: Gauss–Hermite quadrature assembled from the
//! Golub–Welsch eigendecomposition, plus a handful of closed forms.

#![allow(dead_code)]

use nalgebra::DMatrix;

/// Gauss–Hermite rule (physicists' convention, weight e^{−x²}) built from
/// the symmetric Jacobi matrix: zero diagonal, off-diagonal β_k = √(k/2).
/// Nodes are the eigenvalues; weights are √π times the squared first
/// components of the normalized eigenvectors.
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2, "a quadrature rule needs at least two nodes");
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let beta = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = beta;
            jacobi[(k, k - 1)] = beta;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let first = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * first * first)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// E[φ(σZ)] for standard normal Z:
    /// (1/√π) Σ w_i φ(σ√2 x_i).
    pub fn normal_expectation(&self, sigma: f64, phi: impl Fn(f64) -> f64) -> f64 {
        let scale = sigma * std::f64::consts::SQRT_2;
        let sum: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * phi(scale * x))
            .sum();
        sum / std::f64::consts::PI.sqrt()
    }
}

/// E[max(σZ − K, 0)] in closed form (Bachelier call).
pub fn normal_call(sigma: f64, strike: f64) -> f64 {
    let d = strike / sigma;
    sigma * (std_normal_pdf(d) - d * (1.0 - std_normal_cdf(d)))
}

/// E[max(K − σZ, 0)] in closed form (Bachelier put).
pub fn normal_put(sigma: f64, strike: f64) -> f64 {
    let d = strike / sigma;
    strike * std_normal_cdf(d) + sigma * std_normal_pdf(d)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Φ via the complementary error function (a rational approximation is
/// not enough at the 1e-12 scale some identities are checked at).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// erfc from the erf Taylor series for |x| < 3 (cancellation there costs
/// at most ~1e-13 absolute, and erfc(3) ≈ 2e-5 keeps that below 1e-8
/// relative) and the divergent-but-optimally-truncated asymptotic series
/// beyond (~1e-4 relative at x = 3, improving fast with x; only used for
/// reporting far-tail probabilities, never inside assertions).
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 3.0 {
        // erf(x) = (2/√π) Σ (−1)^n x^{2n+1} / (n!(2n+1))
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        // erfc(x) ~ e^{−x²}/(x√π) · Σ (−1)^n (2n−1)!!/(2x²)^n, truncated
        // at the smallest term.
        let inv2x2 = 1.0 / (2.0 * x * x);
        let mut mag = 1.0;
        let mut sum = 1.0;
        for n in 1..40 {
            let next_mag = mag * (2 * n - 1) as f64 * inv2x2;
            if next_mag >= mag {
                break;
            }
            sum += if n % 2 == 1 { -next_mag } else { next_mag };
            mag = next_mag;
        }
        (-x * x).exp() / (x * std::f64::consts::PI.sqrt()) * sum
    }
}

/// E[exp(a·Σ_{k<n}(ΔW_k)²)] for ΔW_k ~ N(0, dt) i.i.d.: each factor is
/// (1 − 2a·dt)^{−1/2}, so the product is (1 − 2a·dt)^{−n/2}.
pub fn chi_square_exponential_moment(a: f64, dt: f64, n: usize) -> f64 {
    let r = 1.0 - 2.0 * a * dt;
    assert!(r > 0.0, "moment diverges: 2a·dt = {} ≥ 1", 2.0 * a * dt);
    r.powf(-(n as f64) / 2.0)
}

/// Upper tail Φ̄(z) of the standard normal.
pub fn std_normal_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}
