//! Master-equation residuals and semi-jet viscosity checks.
//!
//! A candidate value functional is checked against a generator in two
//! regimes. Where the candidate carries a full derivative bundle (or numeric
//! differencing is permitted), [`classical_residual`] evaluates the pointwise
//! residual `d_t V + G(t, mu, V, d_mu V, d_omega d_mu V)`. Where it does not,
//! [`jet_membership_test`] and [`viscosity_check`] work with test paraboloids
//! touching the candidate from one side over a short window, which only needs
//! evaluations of `V` itself.
//!
//! Membership testing is falsification-only: a report that is not refuted
//! says the sampled window produced no counterexample, not that the jet
//! relation holds. Refutations come with a concrete witness.

use std::sync::Arc;

use rayon::prelude::*;

use crate::calculus::{
    default_bump, lions_derivative, second_pathwise_derivative, time_derivative, NumericDiff,
};
use crate::functional::MeasureFunctional;
use crate::grid::{PathView, TIME_SNAP};
use crate::measure::PathMeasure;
use crate::rng::{Purpose, Rng, StreamKey};
use crate::sim::sample_bounded_cloud;
use crate::stats::mean_and_stderr;
use crate::{Error, Result};

/// Per-particle integrand of a generator: fills a small vector of statistics
/// from `(t, omega, y, Z_i, Gamma_i)`. `Z_i` has `d` entries, `Gamma_i` is a
/// row-major `d x d` block.
pub type InnerFn = Arc<dyn Fn(f64, PathView<'_>, f64, &[f64], &[f64], &mut [f64]) + Sync + Send>;

/// Outer map of a generator: combines `(t, y)` with the expectations of the
/// per-particle statistics into the generator value.
pub type OuterFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Sync + Send>;

/// Largest number of per-particle statistics a generator may request.
pub const MAX_GENERATOR_WIDTH: usize = 4;

/// A generator in expectation form:
/// `G(t, mu, y, Z, Gamma) = outer(t, y, E^mu[inner(t, omega, y, Z, Gamma)])`.
///
/// The split makes the empirical error structure explicit: only the inner
/// statistics are averaged over particles, so a standard error for the value
/// can be propagated through the outer map.
#[derive(Clone)]
pub struct GeneratorSpec {
    name: String,
    /// Coefficient bound of the dynamics the equation is posed over.
    pub l0: f64,
    width: usize,
    inner: InnerFn,
    outer: OuterFn,
    /// Declared Lipschitz constant in the measure derivative, against the
    /// mean per-particle Euclidean distance. Checked by [`lipschitz_audit`].
    pub lip_z: f64,
    /// Declared Lipschitz constant in the second derivative, against the
    /// mean per-particle Frobenius distance.
    pub lip_gamma: f64,
}

impl GeneratorSpec {
    pub fn new(
        name: impl Into<String>,
        l0: f64,
        width: usize,
        inner: impl Fn(f64, PathView<'_>, f64, &[f64], &[f64], &mut [f64]) + Sync + Send + 'static,
        outer: impl Fn(f64, f64, &[f64]) -> f64 + Sync + Send + 'static,
    ) -> Result<Self> {
        if width == 0 || width > MAX_GENERATOR_WIDTH {
            return Err(Error::Config(format!(
                "generator width must be in 1..={MAX_GENERATOR_WIDTH} (got {width})"
            )));
        }
        if !(l0 > 0.0) {
            return Err(Error::Config(format!("coefficient bound must be positive (got {l0})")));
        }
        Ok(GeneratorSpec {
            name: name.into(),
            l0,
            width,
            inner: Arc::new(inner),
            outer: Arc::new(outer),
            lip_z: 0.0,
            lip_gamma: 0.0,
        })
    }

    /// Attach the declared Lipschitz constants audited by [`lipschitz_audit`].
    pub fn with_lipschitz(mut self, lip_z: f64, lip_gamma: f64) -> Self {
        self.lip_z = lip_z;
        self.lip_gamma = lip_gamma;
        self
    }

    /// The identically-zero generator over dynamics bounded by `l0`.
    pub fn zero(l0: f64) -> Self {
        GeneratorSpec::new("zero", l0, 1, |_t, _p, _y, _z, _g, w| w[0] = 0.0, |_t, _y, _e| 0.0)
            .expect("static width is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Evaluate the generator on a particle cloud. `z` is particle-major
    /// `n * d`, `gamma` is particle-major row-major `n * d * d`. Returns the
    /// value and a standard error propagated from the inner expectations
    /// through a central difference of the outer map.
    pub fn eval(&self, t: f64, mu: &PathMeasure, y: f64, z: &[f64], gamma: &[f64]) -> Result<(f64, f64)> {
        let n = mu.len();
        let d = mu.dim();
        if z.len() != n * d {
            return Err(Error::Shape(format!(
                "generator '{}': z has {} entries, want n * d = {}",
                self.name,
                z.len(),
                n * d
            )));
        }
        if gamma.len() != n * d * d {
            return Err(Error::Shape(format!(
                "generator '{}': gamma has {} entries, want n * d * d = {}",
                self.name,
                gamma.len(),
                n * d * d
            )));
        }
        let mut cols = vec![vec![0.0; n]; self.width];
        let mut w = vec![0.0; self.width];
        for i in 0..n {
            (self.inner)(t, mu.path(i), y, &z[i * d..(i + 1) * d], &gamma[i * d * d..(i + 1) * d * d], &mut w);
            for (j, &wj) in w.iter().enumerate() {
                if !wj.is_finite() {
                    return Err(Error::Numerics(format!(
                        "generator '{}' produced {wj} in statistic {j} at particle {i}",
                        self.name
                    )));
                }
                cols[j][i] = wj;
            }
        }
        let mut means = vec![0.0; self.width];
        let mut errs = vec![0.0; self.width];
        for j in 0..self.width {
            let (m, se) = mean_and_stderr(&cols[j]);
            means[j] = m;
            errs[j] = se;
        }
        let value = (self.outer)(t, y, &means);
        if !value.is_finite() {
            return Err(Error::Numerics(format!(
                "generator '{}' returned {value} at t = {t}",
                self.name
            )));
        }
        let mut var = 0.0;
        let mut probe = means.clone();
        for j in 0..self.width {
            if errs[j] == 0.0 {
                continue;
            }
            probe[j] = means[j] + errs[j];
            let up = (self.outer)(t, y, &probe);
            probe[j] = means[j] - errs[j];
            let down = (self.outer)(t, y, &probe);
            probe[j] = means[j];
            let grad = (up - down) / (2.0 * errs[j]);
            var += (grad * errs[j]) * (grad * errs[j]);
        }
        Ok((value, var.sqrt()))
    }

    /// The generator of the exponentially changed equation: arguments are
    /// scaled by `exp(-lambda t)` and the value by `exp(lambda t)`, so that
    /// the changed residual of a changed candidate is `exp(lambda t)` times
    /// the original residual. The Lipschitz constants are unchanged because
    /// the two scalings cancel. Applying `lambda` then `-lambda` recovers the
    /// original values at machine precision.
    pub fn exponential_time_scaling(self, lambda: f64) -> Self {
        let name = if lambda == 0.0 {
            self.name.clone()
        } else {
            format!("{}*exp({lambda}t)", self.name)
        };
        let inner = self.inner.clone();
        let scaled_inner: InnerFn = Arc::new(
            move |t: f64, p: PathView<'_>, y: f64, z: &[f64], g: &[f64], w: &mut [f64]| {
                let s = (-lambda * t).exp();
                let zs: Vec<f64> = z.iter().map(|v| v * s).collect();
                let gs: Vec<f64> = g.iter().map(|v| v * s).collect();
                inner(t, p, s * y, &zs, &gs, w);
            },
        );
        let outer = self.outer.clone();
        let scaled_outer: OuterFn = Arc::new(move |t: f64, y: f64, e: &[f64]| {
            (lambda * t).exp() * outer(t, (-lambda * t).exp() * y, e)
        });
        GeneratorSpec {
            name,
            l0: self.l0,
            width: self.width,
            inner: scaled_inner,
            outer: scaled_outer,
            lip_z: self.lip_z,
            lip_gamma: self.lip_gamma,
        }
    }
}

/// Per-path jet coefficient: fills `d` entries (first order) or a row-major
/// `d x d` block (second order). The closure must read path values only at
/// indices up to the jet's base index — the paraboloid freezes coefficients
/// at the base time.
pub type JetCoeffFn = Arc<dyn Fn(PathView<'_>, &mut [f64]) + Sync + Send>;

/// A test paraboloid anchored at `(t, y)`:
/// `phi(s, P) = y + v (s - t) + E^P[Z . D + 1/2 Gamma : D D^T]` with
/// `D = omega_s - omega_t`, examined over the window `[t, t + delta]` against
/// continuations with coefficients bounded by `l`.
#[derive(Clone)]
pub struct JetSpec {
    /// Base time.
    pub t: f64,
    /// Value at the base point; must match the candidate there.
    pub y: f64,
    /// Time slope.
    pub v: f64,
    /// First-order coefficient, evaluated per path at the base time.
    pub z: JetCoeffFn,
    /// Second-order coefficient, evaluated per path at the base time.
    pub gamma: JetCoeffFn,
    /// Window length.
    pub delta: f64,
    /// Coefficient bound for the continuations the jet is tested against.
    pub l: f64,
}

impl JetSpec {
    /// A jet with constant coefficients `z` (length `d`) and `gamma`
    /// (row-major `d x d`).
    pub fn constant(t: f64, y: f64, v: f64, delta: f64, l: f64, z: Vec<f64>, gamma: Vec<f64>) -> Self {
        JetSpec {
            t,
            y,
            v,
            z: Arc::new(move |_p, out| out.copy_from_slice(&z)),
            gamma: Arc::new(move |_p, out| out.copy_from_slice(&gamma)),
            delta,
            l,
        }
    }
}

/// Evaluate the jet's paraboloid at time `s` on the cloud `p`. Increments are
/// taken between the stop indices of `s` and of the base time; `s` may not
/// precede the base time.
pub fn paraboloid_eval(jet: &JetSpec, s: f64, p: &PathMeasure) -> Result<f64> {
    if s < jet.t - TIME_SNAP {
        return Err(Error::Domain(format!(
            "paraboloid evaluated at s = {s} before its base time t = {}",
            jet.t
        )));
    }
    let grid = p.grid();
    let base = grid.floor_index(jet.t)?;
    let ks = grid.floor_index(s)?;
    let d = p.dim();
    let n = p.len();
    let mut z = vec![0.0; d];
    let mut g = vec![0.0; d * d];
    let mut acc = 0.0;
    for i in 0..n {
        (jet.z)(p.path(i), &mut z);
        (jet.gamma)(p.path(i), &mut g);
        let from = p.point(i, base);
        let to = p.point(i, ks);
        let mut linear = 0.0;
        let mut quad = 0.0;
        for r in 0..d {
            let dr = to[r] - from[r];
            linear += z[r] * dr;
            for c in 0..d {
                quad += g[r * d + c] * dr * (to[c] - from[c]);
            }
        }
        acc += linear + 0.5 * quad;
    }
    let value = jet.y + jet.v * (s - jet.t) + acc / n as f64;
    if !value.is_finite() {
        return Err(Error::Numerics(format!(
            "paraboloid at (s = {s}, base t = {}) evaluated to {value}",
            jet.t
        )));
    }
    Ok(value)
}

/// The paraboloid as a measure functional with its full derivative bundle.
///
/// The closed forms follow the discrete right-limit convention: bumps act at
/// the stop index of the evaluation time, so at the base cell itself the
/// functional is flat in the measure (the increment references its own stop
/// point) and the derivatives are zero there; strictly past the base they are
/// `Z + Gamma_sym D` and `Gamma_sym`. The time derivative is `v` everywhere
/// because the increment part is constant on a stopped extension.
pub fn paraboloid_functional(jet: &JetSpec) -> MeasureFunctional {
    let name = format!("paraboloid@t={}", jet.t);
    let j = jet.clone();
    let eval = move |s: f64, mu: &PathMeasure| paraboloid_eval(&j, s, mu).unwrap_or(f64::NAN);
    let v = jet.v;
    let j_dmu = jet.clone();
    let dmu = move |s: f64, mu: &PathMeasure, out: &mut [f64]| {
        let grid = mu.grid();
        let (base, ks) = match (grid.floor_index(j_dmu.t), grid.floor_index(s)) {
            (Ok(b), Ok(k)) => (b, k),
            _ => {
                out.fill(f64::NAN);
                return;
            }
        };
        if ks == base {
            out.fill(0.0);
            return;
        }
        let d = mu.dim();
        let mut z = vec![0.0; d];
        let mut g = vec![0.0; d * d];
        for i in 0..mu.len() {
            (j_dmu.z)(mu.path(i), &mut z);
            (j_dmu.gamma)(mu.path(i), &mut g);
            let from = mu.point(i, base);
            let to = mu.point(i, ks);
            for r in 0..d {
                let mut acc = z[r];
                for c in 0..d {
                    acc += 0.5 * (g[r * d + c] + g[c * d + r]) * (to[c] - from[c]);
                }
                out[i * d + r] = acc;
            }
        }
    };
    let j_dd = jet.clone();
    let domega = move |s: f64, mu: &PathMeasure, out: &mut [f64]| {
        let grid = mu.grid();
        let (base, ks) = match (grid.floor_index(j_dd.t), grid.floor_index(s)) {
            (Ok(b), Ok(k)) => (b, k),
            _ => {
                out.fill(f64::NAN);
                return;
            }
        };
        if ks == base {
            out.fill(0.0);
            return;
        }
        let d = mu.dim();
        let mut g = vec![0.0; d * d];
        for i in 0..mu.len() {
            (j_dd.gamma)(mu.path(i), &mut g);
            for r in 0..d {
                for c in 0..d {
                    out[i * d * d + r * d + c] = 0.5 * (g[r * d + c] + g[c * d + r]);
                }
            }
        }
    };
    MeasureFunctional::new(name, eval)
        .with_dt(move |_s, _mu| v)
        .with_dmu(dmu)
        .with_domega_dmu(domega)
}

/// Options for [`classical_residual`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ResidualOpts {
    /// Permit numeric differencing for derivatives the candidate does not
    /// carry in closed form.
    pub numeric: Option<NumericDiff>,
    /// Coefficient of an extra zeroth-order term `zeroth * V` in the
    /// residual. The exponentially changed equation uses `-lambda`.
    pub zeroth: f64,
}

/// Pointwise residual of a candidate against a generator.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// `time_term + zeroth_term + generator_value`.
    pub residual: f64,
    pub time_term: f64,
    pub zeroth_term: f64,
    pub generator_value: f64,
    /// Propagated empirical error of the generator value; the differentiated
    /// terms carry no sampling error at fixed `mu`.
    pub generator_stderr: f64,
    /// Candidate value at the evaluation point.
    pub value: f64,
}

/// Evaluate `d_t V + zeroth * V + G(t, mu, V, d_mu V, d_omega d_mu V)` at one
/// point. Closed-form derivatives are used where the candidate has them;
/// otherwise numeric differencing must be permitted through `opts.numeric`.
pub fn classical_residual(
    vfn: &MeasureFunctional,
    gen: &GeneratorSpec,
    t: f64,
    mu: &PathMeasure,
    opts: &ResidualOpts,
) -> Result<ResidualReport> {
    let n = mu.len();
    let d = mu.dim();
    let base = mu.grid().floor_index(t)?;
    let y = vfn.eval(t, mu)?;
    let need_numeric = || {
        opts.numeric.ok_or_else(|| {
            Error::Config(format!(
                "candidate '{}' is missing a closed-form derivative and numeric differencing was not permitted",
                vfn.name()
            ))
        })
    };
    let time_term = if vfn.has_dt() {
        vfn.dt_closed(t, mu)?
    } else {
        let nd = need_numeric()?;
        let h = nd.h.unwrap_or(mu.grid().dt() / 2.0);
        time_derivative(vfn, t, mu, h)?
    };
    let mut z = vec![0.0; n * d];
    if vfn.has_dmu() {
        vfn.dmu_closed(t, mu, &mut z)?;
    } else {
        let nd = need_numeric()?;
        let eps = nd.eps.unwrap_or_else(|| default_bump(mu, base));
        for i in 0..n {
            let zi = lions_derivative(vfn, t, mu, i, eps)?;
            z[i * d..(i + 1) * d].copy_from_slice(&zi);
        }
    }
    let mut gamma = vec![0.0; n * d * d];
    if vfn.has_domega_dmu() {
        vfn.domega_dmu_closed(t, mu, &mut gamma)?;
    } else {
        let nd = need_numeric()?;
        let eps = nd.eps.unwrap_or_else(|| default_bump(mu, base));
        for i in 0..n {
            let gi = second_pathwise_derivative(vfn, t, mu, i, eps, eps)?;
            gamma[i * d * d..(i + 1) * d * d].copy_from_slice(&gi);
        }
    }
    let (generator_value, generator_stderr) = gen.eval(t, mu, y, &z, &gamma)?;
    let zeroth_term = opts.zeroth * y;
    Ok(ResidualReport {
        residual: time_term + zeroth_term + generator_value,
        time_term,
        zeroth_term,
        generator_value,
        generator_stderr,
        value: y,
    })
}

/// Which one-sided jet relation is under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Paraboloids touching from above: `phi - V >= 0` on the window.
    Sub,
    /// Paraboloids touching from below: `phi - V <= 0` on the window.
    Super,
}

/// Sampling plan for membership tests: how many bounded continuations to
/// draw, how many window times per continuation, and the comparison slack.
#[derive(Debug, Clone)]
pub struct JetSampler {
    pub measures: usize,
    pub times_per_measure: usize,
    /// Gaps within `slack` of zero satisfy the relation (ties satisfy).
    pub slack: f64,
    pub key: StreamKey,
}

impl JetSampler {
    pub fn new(key: StreamKey) -> Self {
        JetSampler { measures: 125, times_per_measure: 8, slack: 1e-9, key }
    }
}

/// A concrete refutation of a jet relation.
#[derive(Debug, Clone)]
pub struct JetWitness {
    /// Index of the sampled continuation.
    pub measure_index: usize,
    /// Which generator-family member produced it.
    pub member_index: usize,
    /// Window time at which the relation failed.
    pub s: f64,
    pub phi: f64,
    pub value: f64,
}

/// Outcome of a falsification run over the sampled window.
#[derive(Debug, Clone)]
pub struct MembershipReport {
    pub side: Side,
    pub refuted: bool,
    /// The most adverse sample when refuted.
    pub witness: Option<JetWitness>,
    /// Total `(measure, time)` samples examined.
    pub samples: usize,
    /// Most adverse `phi - V` observed: the minimum for the sub side, the
    /// maximum for the super side.
    pub extremal_gap: f64,
    /// Distinct grid times strictly past the base hit by the window sampler.
    /// Zero means the window collapsed to the base point and the run was
    /// vacuous.
    pub later_times: usize,
    /// Bound-projection events inside the sampled continuations.
    pub clamp_events: u64,
}

/// Test whether the jet's paraboloid stays on the declared side of the
/// candidate over `[t, t + delta]` across sampled bounded continuations of
/// `mu`. Falsification-only: `refuted` with a witness, or no counterexample
/// found. The jet's base value must match the candidate at `(t, mu)` within
/// the sampler's slack.
pub fn jet_membership_test(
    vfn: &MeasureFunctional,
    jet: &JetSpec,
    side: Side,
    mu: &PathMeasure,
    sampler: &JetSampler,
) -> Result<MembershipReport> {
    if sampler.measures == 0 || sampler.times_per_measure == 0 {
        return Err(Error::Config("membership sampler needs at least one measure and one time".into()));
    }
    if !(jet.delta >= 0.0) {
        return Err(Error::Config(format!("jet window must be nonnegative (got {})", jet.delta)));
    }
    let y0 = vfn.eval(jet.t, mu)?;
    if (y0 - jet.y).abs() > sampler.slack {
        return Err(Error::Config(format!(
            "jet base value {} differs from candidate '{}' value {} at t = {}",
            jet.y,
            vfn.name(),
            y0,
            jet.t
        )));
    }
    let grid = mu.grid().clone();
    let base = grid.floor_index(jet.t)?;
    let end = grid.floor_index((jet.t + jet.delta).min(grid.horizon()))?;
    let span = end - base + 1;
    let cloud = sample_bounded_cloud(jet.t, mu, jet.l, sampler.measures, sampler.key)?;
    let times = sampler.times_per_measure;
    let per_measure: Vec<Vec<(usize, f64, f64, f64)>> = cloud
        .measures
        .par_iter()
        .enumerate()
        .map(|(j, pj)| {
            let mut rng = Rng::from_key(sampler.key.purpose(Purpose::JetSampler).child(j as u64));
            let mut out = Vec::with_capacity(times);
            for _ in 0..times {
                let k = base + rng.index(span);
                let s = grid.time(k).max(jet.t);
                let phi = paraboloid_eval(jet, s, pj)?;
                let value = vfn.eval(s, pj)?;
                out.push((k, s, phi, value));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut later_seen = vec![false; span];
    let mut extremal_gap = match side {
        Side::Sub => f64::INFINITY,
        Side::Super => f64::NEG_INFINITY,
    };
    let mut extremal_at: Option<(usize, usize)> = None;
    for (j, rows) in per_measure.iter().enumerate() {
        for (slot, &(k, _, phi, value)) in rows.iter().enumerate() {
            if k > base {
                later_seen[k - base] = true;
            }
            let gap = phi - value;
            let more_adverse = match side {
                Side::Sub => gap < extremal_gap,
                Side::Super => gap > extremal_gap,
            };
            if more_adverse {
                extremal_gap = gap;
                extremal_at = Some((j, slot));
            }
        }
    }
    let refuted = match side {
        Side::Sub => extremal_gap < -sampler.slack,
        Side::Super => extremal_gap > sampler.slack,
    };
    let witness = if refuted {
        extremal_at.map(|(j, slot)| {
            let (_, s, phi, value) = per_measure[j][slot];
            JetWitness {
                measure_index: j,
                member_index: cloud.member_indices[j],
                s,
                phi,
                value,
            }
        })
    } else {
        None
    };
    Ok(MembershipReport {
        side,
        refuted,
        witness,
        samples: sampler.measures * times,
        extremal_gap,
        later_times: later_seen.iter().filter(|&&b| b).count(),
        clamp_events: cloud.clamp_events,
    })
}

/// One-sided inequality check at a jet.
#[derive(Debug, Clone)]
pub struct ViscosityReport {
    pub side: Side,
    /// `v + G` at the jet's coefficients.
    pub scalar: f64,
    pub generator_value: f64,
    pub generator_stderr: f64,
    /// `3 * generator_stderr + 1e-9`; the inequality is enforced up to this.
    pub tolerance: f64,
    pub satisfied: bool,
    pub membership: MembershipReport,
}

/// Check the viscosity inequality `v + G >= 0` (sub side) or `v + G <= 0`
/// (super side) at a jet of the candidate. Membership is verified first; a
/// refuted jet is a configuration error — the inequality would be tested at a
/// paraboloid that is not actually one-sided, which usually means the side
/// was mixed up.
pub fn viscosity_check(
    vfn: &MeasureFunctional,
    gen: &GeneratorSpec,
    jet: &JetSpec,
    side: Side,
    mu: &PathMeasure,
    sampler: &JetSampler,
) -> Result<ViscosityReport> {
    let membership = jet_membership_test(vfn, jet, side, mu, sampler)?;
    if membership.refuted {
        let w = membership.witness.as_ref().expect("refuted report carries a witness");
        return Err(Error::Config(format!(
            "jet at t = {} is not in the {:?} semi-jet of '{}' (gap {:.3e} at s = {}, member {}); check the side",
            jet.t,
            side,
            vfn.name(),
            membership.extremal_gap,
            w.s,
            w.member_index
        )));
    }
    let n = mu.len();
    let d = mu.dim();
    let mut z = vec![0.0; n * d];
    let mut gamma = vec![0.0; n * d * d];
    for i in 0..n {
        (jet.z)(mu.path(i), &mut z[i * d..(i + 1) * d]);
        (jet.gamma)(mu.path(i), &mut gamma[i * d * d..(i + 1) * d * d]);
    }
    let (generator_value, generator_stderr) = gen.eval(jet.t, mu, jet.y, &z, &gamma)?;
    let scalar = jet.v + generator_value;
    let tolerance = 3.0 * generator_stderr + 1e-9;
    let satisfied = match side {
        Side::Sub => scalar >= -tolerance,
        Side::Super => scalar <= tolerance,
    };
    Ok(ViscosityReport {
        side,
        scalar,
        generator_value,
        generator_stderr,
        tolerance,
        satisfied,
        membership,
    })
}

/// Exponential change of variables: returns the transformed candidate
/// `exp(lambda t) V` and the matching generator, under which the residual of
/// the changed equation `d_t W - lambda W + G~(...)` equals `exp(lambda t)`
/// times the original residual. Involutive up to machine precision.
pub fn exponential_change(
    vfn: &MeasureFunctional,
    gen: &GeneratorSpec,
    lambda: f64,
) -> (MeasureFunctional, GeneratorSpec) {
    (
        vfn.clone().exponential_time_scaling(lambda),
        gen.clone().exponential_time_scaling(lambda),
    )
}

/// Outcome of a randomized generator audit. `max_excess` is the largest
/// violation of the audited inequality across trials; nonpositive means
/// every trial satisfied it.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub trials: usize,
    pub max_excess: f64,
}

/// Audit the declared Lipschitz constants: over random Gaussian coefficient
/// pairs, `|G(Z, Gamma) - G(Z', Gamma')|` must not exceed
/// `lip_z * mean_i |Z_i - Z'_i| + lip_gamma * mean_i |Gamma_i - Gamma'_i|_F`.
pub fn lipschitz_audit(
    gen: &GeneratorSpec,
    t: f64,
    mu: &PathMeasure,
    trials: usize,
    key: StreamKey,
) -> Result<AuditReport> {
    if trials == 0 {
        return Err(Error::Config("audit needs at least one trial".into()));
    }
    let n = mu.len();
    let d = mu.dim();
    let mut rng = Rng::from_key(key.purpose(Purpose::Audit));
    let mut max_excess = f64::NEG_INFINITY;
    let mut za = vec![0.0; n * d];
    let mut zb = vec![0.0; n * d];
    let mut ga = vec![0.0; n * d * d];
    let mut gb = vec![0.0; n * d * d];
    for _ in 0..trials {
        let y = rng.normal();
        rng.fill_normal(&mut za);
        rng.fill_normal(&mut zb);
        rng.fill_normal(&mut ga);
        rng.fill_normal(&mut gb);
        let (va, _) = gen.eval(t, mu, y, &za, &ga)?;
        let (vb, _) = gen.eval(t, mu, y, &zb, &gb)?;
        let mut dz = 0.0;
        let mut dg = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for r in 0..d {
                let diff = za[i * d + r] - zb[i * d + r];
                s += diff * diff;
            }
            dz += s.sqrt();
            let mut f = 0.0;
            for r in 0..d * d {
                let diff = ga[i * d * d + r] - gb[i * d * d + r];
                f += diff * diff;
            }
            dg += f.sqrt();
        }
        dz /= n as f64;
        dg /= n as f64;
        let excess = (va - vb).abs() - (gen.lip_z * dz + gen.lip_gamma * dg);
        max_excess = max_excess.max(excess);
    }
    Ok(AuditReport { trials, max_excess })
}

/// Audit degenerate ellipticity: adding a random per-particle positive
/// semidefinite matrix to `Gamma` must not decrease the generator value.
/// `max_excess` is the largest observed decrease.
pub fn monotonicity_audit(
    gen: &GeneratorSpec,
    t: f64,
    mu: &PathMeasure,
    trials: usize,
    key: StreamKey,
) -> Result<AuditReport> {
    if trials == 0 {
        return Err(Error::Config("audit needs at least one trial".into()));
    }
    let n = mu.len();
    let d = mu.dim();
    let mut rng = Rng::from_key(key.purpose(Purpose::Audit).child(1));
    let mut max_excess = f64::NEG_INFINITY;
    let mut z = vec![0.0; n * d];
    let mut g = vec![0.0; n * d * d];
    let mut b = vec![0.0; d * d];
    for _ in 0..trials {
        let y = rng.normal();
        rng.fill_normal(&mut z);
        rng.fill_normal(&mut g);
        let (low, _) = gen.eval(t, mu, y, &z, &g)?;
        let mut bumped = g.clone();
        for i in 0..n {
            rng.fill_normal(&mut b);
            for r in 0..d {
                for c in 0..d {
                    let mut add = 0.0;
                    for m in 0..d {
                        add += b[r * d + m] * b[c * d + m];
                    }
                    bumped[i * d * d + r * d + c] += add;
                }
            }
        }
        let (high, _) = gen.eval(t, mu, y, &z, &bumped)?;
        max_excess = max_excess.max(low - high);
    }
    Ok(AuditReport { trials, max_excess })
}
