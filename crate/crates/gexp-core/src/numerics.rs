//! Small numerical utilities: order-stable summation and log-space
//! weighted means.
//!
//! Every Monte Carlo reduction in this crate goes through [`pairwise_sum`]
//! so that results do not depend on how paths were partitioned across
//! workers: per-path values are first collected into a slice indexed by
//! path, then summed in a fixed tree order. This keeps the determinism
//! contract (identical results for any `--threads`) down to the last bit,
//! rather than merely within a tolerance.

/// Pairwise (cascade) summation.
///
/// Error grows like O(log n) in the number of terms instead of O(n) for
/// naive left-to-right accumulation, and the result is a pure function of
/// the slice contents and order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 32;
    if xs.len() <= BASE {
        // Small blocks are summed sequentially; this is the recursion base.
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Sample mean via pairwise summation.
pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of empty slice");
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample mean and standard error of the mean (sample std / sqrt(n)).
///
/// Uses a two-pass formula with pairwise sums so the result is independent
/// of worker partitioning. For a single observation the standard error is
/// reported as 0.
pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 0, "mean_and_std_error of empty slice");
    let m = mean(xs);
    if n == 1 {
        return (m, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Mean of `v_i * exp(log_w_i)` computed with the log-sum-exp guard.
///
/// Used by weighted (Girsanov) estimators: weights are kept in log space
/// and the common exponential scale is factored out before summation, so
/// the estimator stays finite as long as the final result is representable.
pub fn weighted_mean_log_space(values: &[f64], log_weights: &[f64]) -> f64 {
    assert_eq!(values.len(), log_weights.len());
    assert!(!values.is_empty(), "weighted mean of empty slice");
    let lmax = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() {
        // All weights are zero (log -inf): the weighted mean is zero.
        return 0.0;
    }
    let terms: Vec<f64> = values
        .iter()
        .zip(log_weights)
        .map(|(&v, &lw)| v * (lw - lmax).exp())
        .collect();
    let m = mean(&terms);
    if lmax < 500.0 {
        // Fast path: the common scale is representable on its own.
        lmax.exp() * m
    } else if m == 0.0 {
        0.0
    } else {
        // Recombine in log space: exp(lmax) alone may overflow even when
        // the product is representable.
        m.signum() * (lmax + m.abs().ln()).exp()
    }
}

/// Relative gap |a - b| / max(|a|, |b|, floor) used in reports and tests.
pub fn relative_gap(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
