//! Statistical kernel: Wilson score intervals for proportions, Katz
//! log-ratio intervals for ratios of proportions, and two-tailed p-values.
//!
//! Counts may be fractional when they come from likelihood-weighted
//! (fractional) name counting; the `*_weighted` variants accept real-valued
//! successes and counts, the integer forms delegate to them.

use libm::erfc;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

/// Two-sided 95% normal quantile used for every 95% construction.
pub const Z95: f64 = 1.959964;

const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StatsError {
    #[error("sample size must be positive")]
    EmptySample,
    #[error("successes ({successes}) exceed trials ({n})")]
    SuccessesExceedTrials { successes: f64, n: f64 },
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("reference proportion must lie in (0, 1), got {0}")]
    InvalidProportion(f64),
    #[error("zero count in ratio (a = {a}, b = {b}); apply smoothing upstream")]
    ZeroCount { a: f64, b: f64 },
    #[error("degenerate interval [{low}, {high}]")]
    DegenerateInterval { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    pub confidence: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided normal quantile for `confidence`, i.e. `z` with
/// `P(|Z| <= z) = confidence`. 0.95 maps to [`Z95`].
pub fn z_for_confidence(confidence: f64) -> Result<f64, StatsError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::InvalidConfidence(confidence));
    }
    if confidence == 0.95 {
        return Ok(Z95);
    }
    Ok(std::f64::consts::SQRT_2 * erfc_inv(1.0 - confidence))
}

/// Two-tailed p-value of a standard normal statistic.
pub fn two_tailed_p(z: f64) -> f64 {
    (2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0)
}

fn wilson_bounds(p_hat: f64, n: f64, z: f64) -> (f64, f64) {
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = p_hat + z2 / (2.0 * n);
    let spread = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).max(0.0).sqrt();
    let mut low = ((center - spread) / denom).max(0.0);
    let mut high = ((center + spread) / denom).min(1.0);
    // The closed form is exact at the boundaries; pin them against rounding.
    if p_hat <= 0.0 {
        low = 0.0;
    }
    if p_hat >= 1.0 {
        high = 1.0;
    }
    (low, high)
}

fn check_binomial(successes: f64, n: f64) -> Result<(), StatsError> {
    if !(n > 0.0) {
        return Err(StatsError::EmptySample);
    }
    if successes < 0.0 || successes > n {
        return Err(StatsError::SuccessesExceedTrials { successes, n });
    }
    Ok(())
}

/// Wilson score interval for `successes` out of `n` trials.
pub fn wilson_interval(successes: u64, n: u64, confidence: f64) -> Result<Interval, StatsError> {
    wilson_interval_weighted(successes as f64, n as f64, confidence)
}

/// Wilson score interval with a real-valued success mass.
pub fn wilson_interval_weighted(successes: f64, n: f64, confidence: f64) -> Result<Interval, StatsError> {
    check_binomial(successes, n)?;
    let z = z_for_confidence(confidence)?;
    let (low, high) = wilson_bounds(successes / n, n, z);
    Ok(Interval { low, high, confidence })
}

/// Two-tailed p-value for the null `p = p_star`: the smallest `alpha` for
/// which `p_star` sits on the boundary of the `(1 - alpha)` Wilson interval,
/// found by bisection on `alpha`.
pub fn wilson_p_value(successes: u64, n: u64, p_star: f64) -> Result<f64, StatsError> {
    wilson_p_value_weighted(successes as f64, n as f64, p_star)
}

pub fn wilson_p_value_weighted(successes: f64, n: f64, p_star: f64) -> Result<f64, StatsError> {
    check_binomial(successes, n)?;
    if !(p_star > 0.0 && p_star < 1.0) {
        return Err(StatsError::InvalidProportion(p_star));
    }
    let p_hat = successes / n;
    if p_hat == p_star {
        return Ok(1.0);
    }
    let inside = |alpha: f64| {
        let z = std::f64::consts::SQRT_2 * erfc_inv(alpha);
        let (low, high) = wilson_bounds(p_hat, n, z);
        low <= p_star && p_star <= high
    };
    // inside(alpha) is monotone: true for small alpha (wide), false near 1.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    if inside(hi) {
        return Ok(1.0);
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if inside(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Standard error of `ln((a/n1)/(b/n2))` under the Katz approximation.
pub fn log_ratio_se(a: f64, n1: f64, b: f64, n2: f64) -> Result<f64, StatsError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(StatsError::ZeroCount { a, b });
    }
    check_binomial(a, n1)?;
    check_binomial(b, n2)?;
    Ok((1.0 / a - 1.0 / n1 + 1.0 / b - 1.0 / n2).max(0.0).sqrt())
}

/// Katz log-transformed interval for the ratio `(a/n1)/(b/n2)`.
pub fn log_ratio_interval(a: u64, n1: u64, b: u64, n2: u64, confidence: f64) -> Result<Interval, StatsError> {
    log_ratio_interval_weighted(a as f64, n1 as f64, b as f64, n2 as f64, confidence)
}

pub fn log_ratio_interval_weighted(a: f64, n1: f64, b: f64, n2: f64, confidence: f64) -> Result<Interval, StatsError> {
    let se = log_ratio_se(a, n1, b, n2)?;
    let z = z_for_confidence(confidence)?;
    let ratio = (a / n1) / (b / n2);
    Ok(interval_around(ratio, se, z, confidence))
}

/// `ratio * exp(+-z*se)`.
pub fn interval_around(ratio: f64, se: f64, z: f64, confidence: f64) -> Interval {
    let factor = (z * se).exp();
    Interval { low: ratio / factor, high: ratio * factor, confidence }
}

/// Two-tailed p-value recovered from a 95% log-scale ratio interval
/// (Altman and Bland): the standard error is read off the interval width.
pub fn p_from_ratio_ci(ratio: f64, interval: &Interval) -> Result<f64, StatsError> {
    let (low, high) = (interval.low, interval.high);
    if !(low > 0.0 && high > low) {
        return Err(StatsError::DegenerateInterval { low, high });
    }
    let se = (high.ln() - low.ln()) / (2.0 * Z95);
    Ok(two_tailed_p(ratio.ln() / se))
}
