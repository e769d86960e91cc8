//! Empirical survival curves with binomial confidence bands.
//!
//! Given positive waiting times, the survival estimate at `t` is the
//! fraction of times exceeding `t`, banded by the Agresti-Coull interval at
//! 95%: with `M` samples, `n` of them beyond `t`, and `z = 1.96`,
//!
//! `n~ = M + z^2`, `p~ = (n + z^2 / 2) / n~`, half-width `z sqrt(p~ (1 - p~) / n~)`.

pub const Z_95: f64 = 1.96;

/// Survival estimate and confidence band at one time point.
#[derive(Debug, Clone, Copy)]
pub struct SurvivalPoint {
    pub t: f64,
    /// Number of samples strictly beyond `t`.
    pub n_beyond: usize,
    /// Point estimate `n_beyond / M`.
    pub survival: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SurvivalPoint {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }
}

/// Survival curve of `taus` evaluated at `times` (both in ascending order of
/// `times`; `taus` need not be sorted).
pub fn survival_points(taus: &[f64], times: &[f64]) -> Vec<SurvivalPoint> {
    let m = taus.len();
    times
        .iter()
        .map(|&t| {
            let n = taus.iter().filter(|&&tau| tau > t).count();
            let (lower, upper) = agresti_coull(n, m);
            SurvivalPoint {
                t,
                n_beyond: n,
                survival: if m > 0 { n as f64 / m as f64 } else { 0.0 },
                lower,
                upper,
            }
        })
        .collect()
}

/// 95% Agresti-Coull interval for `successes` out of `trials`.
pub fn agresti_coull(successes: usize, trials: usize) -> (f64, f64) {
    let z2 = Z_95 * Z_95;
    let n_tilde = trials as f64 + z2;
    let p_tilde = (successes as f64 + z2 / 2.0) / n_tilde;
    let half = Z_95 * (p_tilde * (1.0 - p_tilde) / n_tilde).sqrt();
    ((p_tilde - half).max(0.0), (p_tilde + half).min(1.0))
}

/// `count` evenly spaced times between the 10th and 99th percentile of
/// `taus`. Degenerate spreads collapse to a single time.
pub fn default_times(taus: &[f64], count: usize) -> Vec<f64> {
    assert!(!taus.is_empty() && count > 0);
    let mut sorted = taus.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile(&sorted, 0.10);
    let hi = percentile(&sorted, 0.99);
    if !(hi > lo) || count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len());
    sorted[idx - 1]
}
