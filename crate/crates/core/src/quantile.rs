//! Rank-based monotone transport of scalar samples onto a target law.
//!
//! [`QuantileTransport`] realises `φ = F_target⁻¹ ∘ F̂_ζ`: the empirical CDF
//! of a scalar sample composed with the generalized inverse of a caller-
//! supplied target CDF. Pushing the sample through `φ` produces a sample
//! whose empirical law matches the target at the mid-rank quantile levels
//! `(r - 0.5)/N`; ties share their mid-rank level, so mass points of the
//! sample map to single points of the target.
//!
//! The generalized inverse `F⁻¹(p) = inf{z : F(z) ≥ p}` is computed by
//! expanding-bracket bisection on the supplied CDF, with monotonicity spot
//! checks (a decreasing probe is a domain error, not a silent wrong answer).

use crate::{Error, Result};

/// Monotone rank map from a fixed scalar sample.
#[derive(Debug, Clone)]
pub struct QuantileTransport {
    sorted: Vec<f64>,
}

impl QuantileTransport {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("quantile transport needs a non-empty sample".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("quantile transport sample holds non-finite values".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(QuantileTransport { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Mid-rank empirical CDF level of `x`: `(#{ζ < x} + ½ #{ζ = x}) / N`,
    /// clamped into `[1/(2N), 1 - 1/(2N)]` so generalized inverses stay finite.
    pub fn level(&self, x: f64) -> f64 {
        let n = self.sorted.len();
        let below = self.sorted.partition_point(|&v| v < x);
        let at_or_below = self.sorted.partition_point(|&v| v <= x);
        let ties = at_or_below - below;
        let raw = (below as f64 + 0.5 * ties as f64) / n as f64;
        raw.clamp(0.5 / n as f64, 1.0 - 0.5 / n as f64)
    }

    /// Transport a point through `F_target⁻¹ ∘ F̂`.
    pub fn map(&self, x: f64, target_cdf: impl Fn(f64) -> f64) -> Result<f64> {
        generalized_inverse(target_cdf, self.level(x))
    }

    /// Transport a whole sample; preserves input order.
    pub fn push(&self, xs: &[f64], target_cdf: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        xs.iter().map(|&x| generalized_inverse(&target_cdf, self.level(x))).collect()
    }
}

/// Generalized inverse `inf{z : F(z) ≥ p}` by expanding-bracket bisection.
///
/// `F` must be a nondecreasing CDF-like function; violations observed at the
/// probe points are reported as domain errors.
pub fn generalized_inverse(cdf: impl Fn(f64) -> f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("quantile level {p} outside [0, 1]")));
    }
    let mut lo = -1.0f64;
    let mut hi = 1.0f64;
    let mut flo = cdf(lo);
    let mut fhi = cdf(hi);
    if flo > fhi {
        return Err(Error::Domain("target CDF is decreasing on [-1, 1]".into()));
    }
    let mut expansions = 0;
    while flo >= p {
        lo *= 2.0;
        let f = cdf(lo);
        if f > flo {
            return Err(Error::Domain(format!("target CDF is decreasing near {lo}")));
        }
        flo = f;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Domain(format!("target CDF never drops below level {p}")));
        }
    }
    while fhi < p {
        hi *= 2.0;
        let f = cdf(hi);
        if f < fhi {
            return Err(Error::Domain(format!("target CDF is decreasing near {hi}")));
        }
        fhi = f;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Domain(format!("target CDF never reaches level {p}")));
        }
    }
    // Invariant: F(lo) < p <= F(hi). ~110 halvings pin the crossing to the
    // last representable bit at any bracket width that survives expansion.
    for _ in 0..110 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Exact squared 2-Wasserstein distance between two equal-size scalar samples
/// (sorted pairing is optimal in one dimension). Used as an independent
/// oracle for the assignment-based solver in tests.
pub fn w2_squared_sorted_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("1-d transport oracle needs equal non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut pair_costs: Vec<f64> =
        sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).collect();
    pair_costs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(pair_costs.iter().sum::<f64>() / a.len() as f64)
}
