//! Coefficient fields for controlled mean-field dynamics.
//!
//! A [`DynamicsSpec`] carries drift and volatility closures evaluated at one
//! particle's discrete past plus the running empirical mean — the only
//! interaction channel the simulator exposes. Coefficients are hard-bounded:
//! every evaluation is projected onto a norm ball and an audit counter
//! records how often the projection actually moved anything, so a run
//! manifest can certify that the advertised bounds were never active.
//!
//! [`bounded_family_member`] enumerates a small documented family of
//! generators with drift in the Euclidean ball of radius `L` and volatility
//! with `0.5 * frobenius^2 <= L`. The family mixes constant, time-switching,
//! sign-feedback and mean-reverting members so that sampled clouds probe a
//! test function from several directions rather than one.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::grid::PathView;
use crate::rng::Rng;
use crate::{Error, Result};

/// Everything a coefficient may read at one step: the particle's own past up
/// to index `k` and the empirical mean state at `k`.
pub struct StepCtx<'a> {
    /// Grid index of the current state.
    pub k: usize,
    /// Time at index `k`.
    pub s: f64,
    /// Step size of the simulation grid.
    pub dt: f64,
    /// Terminal time of the simulation grid.
    pub horizon: f64,
    /// This particle's path; entries beyond `k` are not yet meaningful.
    pub path: PathView<'a>,
    /// Empirical mean state over all particles at index `k`.
    pub mean: &'a [f64],
}

impl StepCtx<'_> {
    /// Current state of the particle.
    pub fn state(&self) -> &[f64] {
        self.path.point(self.k)
    }
}

/// Admissible action values for a controlled specification.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSet {
    /// Uncontrolled: the action argument is ignored (policies are rejected).
    None,
    /// Finitely many admissible values.
    Finite(Vec<f64>),
    /// Closed interval `[lo, hi]`.
    Interval { lo: f64, hi: f64 },
}

impl ActionSet {
    pub fn contains(&self, a: f64) -> bool {
        match self {
            ActionSet::None => true,
            ActionSet::Finite(v) => v.iter().any(|&x| x == a),
            ActionSet::Interval { lo, hi } => a.is_finite() && *lo <= a && a <= *hi,
        }
    }
}

type CoeffFn = Box<dyn Fn(&StepCtx<'_>, f64, &mut [f64]) + Sync + Send>;

/// Drift and volatility of one controlled mean-field equation.
pub struct DynamicsSpec {
    d: usize,
    drift: CoeffFn,
    vol: CoeffFn,
    /// Admissible actions; checked at every interval start.
    pub action_set: ActionSet,
    /// Euclidean bound applied to each drift evaluation.
    pub drift_bound: f64,
    /// Frobenius bound applied to each volatility evaluation.
    pub vol_bound: f64,
}

impl DynamicsSpec {
    /// Bound large enough that well-posed examples never touch it; the audit
    /// counter stays zero unless a coefficient is genuinely wild.
    pub const LOOSE_BOUND: f64 = 1e6;

    /// General constructor. `drift` writes `d` entries, `vol` writes a
    /// row-major `d x d` matrix.
    pub fn new(
        d: usize,
        action_set: ActionSet,
        drift_bound: f64,
        vol_bound: f64,
        drift: CoeffFn,
        vol: CoeffFn,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("dynamics need a positive dimension".into()));
        }
        if !(drift_bound > 0.0) || !(vol_bound >= 0.0) {
            return Err(Error::Config(format!(
                "coefficient bounds must be positive (got {drift_bound}, {vol_bound})"
            )));
        }
        Ok(DynamicsSpec { d, drift, vol, action_set, drift_bound, vol_bound })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Uncontrolled dynamics with constant coefficients `b` and `sigma * I`.
    pub fn constant(b: Vec<f64>, sigma: f64) -> Self {
        let d = b.len();
        assert!(d > 0, "constant dynamics need a positive dimension");
        let bound = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0)
            + sigma.abs() * (d as f64).sqrt()
            + 1.0;
        DynamicsSpec {
            d,
            drift: Box::new(move |_ctx, _a, out| out.copy_from_slice(&b)),
            vol: Box::new(move |_ctx, _a, out| {
                out.fill(0.0);
                for j in 0..d {
                    out[j * d + j] = sigma;
                }
            }),
            action_set: ActionSet::None,
            drift_bound: bound,
            vol_bound: bound,
        }
    }

    /// Standard Brownian motion in `d` dimensions.
    pub fn brownian(d: usize) -> Self {
        DynamicsSpec::constant(vec![0.0; d], 1.0)
    }

    /// Frozen dynamics: paths do not move past the start time.
    pub fn frozen(d: usize) -> Self {
        DynamicsSpec::constant(vec![0.0; d], 0.0)
    }

    /// Scalar controlled drift `dX = a dt + sigma dB`: the action is the
    /// drift itself.
    pub fn controlled_drift(action_set: ActionSet, sigma: f64) -> Self {
        assert!(
            action_set != ActionSet::None,
            "controlled drift needs an action set"
        );
        DynamicsSpec {
            d: 1,
            drift: Box::new(|_ctx, a, out| out[0] = a),
            vol: Box::new(move |_ctx, _a, out| out[0] = sigma),
            action_set,
            drift_bound: Self::LOOSE_BOUND,
            vol_bound: Self::LOOSE_BOUND,
        }
    }

    /// Evaluate the drift, project onto the bound ball, count if it moved.
    pub fn drift_clamped(&self, ctx: &StepCtx<'_>, a: f64, out: &mut [f64], audit: &AtomicU64) {
        debug_assert_eq!(out.len(), self.d);
        (self.drift)(ctx, a, out);
        project_ball(out, self.drift_bound, audit);
    }

    /// Evaluate the volatility matrix, project onto the Frobenius ball.
    pub fn vol_clamped(&self, ctx: &StepCtx<'_>, a: f64, out: &mut [f64], audit: &AtomicU64) {
        debug_assert_eq!(out.len(), self.d * self.d);
        (self.vol)(ctx, a, out);
        project_ball(out, self.vol_bound, audit);
    }
}

impl std::fmt::Debug for DynamicsSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DynamicsSpec")
            .field("d", &self.d)
            .field("action_set", &self.action_set)
            .field("drift_bound", &self.drift_bound)
            .field("vol_bound", &self.vol_bound)
            .finish()
    }
}

fn project_ball(v: &mut [f64], bound: f64, audit: &AtomicU64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > bound {
        let scale = bound / norm;
        for x in v.iter_mut() {
            *x *= scale;
        }
        audit.fetch_add(1, Ordering::Relaxed);
    }
}

/// Number of members in the bounded generator family.
pub const BOUNDED_FAMILY_SIZE: usize = 8;

/// Member `index % BOUNDED_FAMILY_SIZE` of the bounded generator family with
/// constants `L`: drift in the Euclidean ball of radius `L`, volatility with
/// `0.5 * frobenius^2 <= L`. Random members draw their parameters from `rng`
/// so repeated samples of the same member still differ.
///
/// Members:
/// 0. zero drift, zero volatility (frozen paths);
/// 1. maximal constant drift `+L / sqrt(d)` per coordinate, no noise;
/// 2. the same drift negated;
/// 3. maximal isotropic volatility `sqrt(2 L / d) * I`, no drift;
/// 4. constant drift uniform in the `L`-ball, isotropic volatility with a
///    uniform scale in `[0, sqrt(2 L / d)]`;
/// 5. time switch: drift flips sign at half the horizon, mild noise;
/// 6. sign feedback `-(L / sqrt(d)) * sign(x)` with isotropic noise;
/// 7. reversion towards the running empirical mean with isotropic noise.
pub fn bounded_family_member(index: usize, l: f64, d: usize, rng: &mut Rng) -> DynamicsSpec {
    assert!(l > 0.0 && d > 0, "family needs L > 0 and a positive dimension");
    let per_coord = l / (d as f64).sqrt();
    let max_vol = (2.0 * l / d as f64).sqrt();
    let half_vol = (l / d as f64).sqrt();
    let iso = move |scale: f64| -> CoeffFn {
        Box::new(move |_ctx: &StepCtx<'_>, _a, out: &mut [f64]| {
            out.fill(0.0);
            for j in 0..d {
                out[j * d + j] = scale;
            }
        })
    };
    let zero_drift: CoeffFn = Box::new(|_ctx, _a, out| out.fill(0.0));
    let const_drift = move |v: Vec<f64>| -> CoeffFn {
        Box::new(move |_ctx: &StepCtx<'_>, _a, out: &mut [f64]| out.copy_from_slice(&v))
    };

    let (drift, vol): (CoeffFn, CoeffFn) = match index % BOUNDED_FAMILY_SIZE {
        0 => (zero_drift, iso(0.0)),
        1 => (const_drift(vec![per_coord; d]), iso(0.0)),
        2 => (const_drift(vec![-per_coord; d]), iso(0.0)),
        3 => (zero_drift, iso(max_vol)),
        4 => {
            // Direction uniform on the sphere (normalized Gaussian), radius
            // uniform in [0, L].
            let mut dir = vec![0.0; d];
            rng.fill_normal(&mut dir);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            let radius = l * rng.uniform();
            for x in dir.iter_mut() {
                *x *= radius / norm;
            }
            let scale = max_vol * rng.uniform();
            (const_drift(dir), iso(scale))
        }
        5 => {
            let switch = rng.uniform_in(0.2, 0.8);
            (
                Box::new(move |ctx: &StepCtx<'_>, _a, out: &mut [f64]| {
                    let sign = if ctx.s < switch * ctx.horizon { 1.0 } else { -1.0 };
                    out.fill(sign * per_coord);
                }),
                iso(half_vol),
            )
        }
        6 => (
            Box::new(move |ctx: &StepCtx<'_>, _a, out: &mut [f64]| {
                for (o, x) in out.iter_mut().zip(ctx.state()) {
                    *o = -per_coord * x.signum();
                }
            }),
            iso(half_vol),
        ),
        _ => (
            Box::new(move |ctx: &StepCtx<'_>, _a, out: &mut [f64]| {
                let state = ctx.state();
                let mut norm_sq = 0.0;
                for j in 0..d {
                    let diff = ctx.mean[j] - state[j];
                    out[j] = diff;
                    norm_sq += diff * diff;
                }
                // Saturating reversion keeps the member inside the ball
                // without tripping the audit counter.
                let norm = norm_sq.sqrt();
                if norm > l {
                    let scale = l / norm;
                    for o in out.iter_mut() {
                        *o *= scale;
                    }
                }
            }),
            iso(half_vol),
        ),
    };

    DynamicsSpec {
        d,
        drift,
        vol,
        action_set: ActionSet::None,
        drift_bound: l,
        vol_bound: (2.0 * l).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SamplePath;
    use crate::rng::{Purpose, StreamKey};

    fn ctx_on<'a>(path: &'a SamplePath, mean: &'a [f64]) -> StepCtx<'a> {
        StepCtx { k: 0, s: 0.0, dt: 0.1, horizon: 1.0, path: path.view(), mean }
    }

    #[test]
    fn constant_spec_writes_expected_coefficients() {
        let spec = DynamicsSpec::constant(vec![1.0, -2.0], 0.5);
        let path = SamplePath::constant(3, &[0.0, 0.0]);
        let mean = [0.0, 0.0];
        let ctx = ctx_on(&path, &mean);
        let audit = AtomicU64::new(0);
        let mut b = [0.0; 2];
        let mut s = [0.0; 4];
        spec.drift_clamped(&ctx, 0.0, &mut b, &audit);
        spec.vol_clamped(&ctx, 0.0, &mut s, &audit);
        assert_eq!(b, [1.0, -2.0]);
        assert_eq!(s, [0.5, 0.0, 0.0, 0.5]);
        assert_eq!(audit.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn projection_counts_and_scales() {
        let spec = DynamicsSpec::new(
            1,
            ActionSet::None,
            2.0,
            1.0,
            Box::new(|_c, _a, out| out[0] = 10.0),
            Box::new(|_c, _a, out| out[0] = 0.5),
        )
        .unwrap();
        let path = SamplePath::constant(3, &[0.0]);
        let mean = [0.0];
        let ctx = ctx_on(&path, &mean);
        let audit = AtomicU64::new(0);
        let mut b = [0.0];
        spec.drift_clamped(&ctx, 0.0, &mut b, &audit);
        assert_eq!(b[0], 2.0);
        assert_eq!(audit.load(Ordering::Relaxed), 1);
        let mut s = [0.0];
        spec.vol_clamped(&ctx, 0.0, &mut s, &audit);
        assert_eq!(s[0], 0.5);
        assert_eq!(audit.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn action_sets_check_membership() {
        assert!(ActionSet::None.contains(123.0));
        let fin = ActionSet::Finite(vec![-1.0, 0.0, 1.0]);
        assert!(fin.contains(-1.0) && !fin.contains(0.5));
        let iv = ActionSet::Interval { lo: -1.0, hi: 1.0 };
        assert!(iv.contains(1.0) && !iv.contains(1.0001) && !iv.contains(f64::NAN));
    }

    #[test]
    fn family_members_respect_bounds_without_clamping() {
        let l = 1.7;
        let d = 3;
        let key = StreamKey::root(42).purpose(Purpose::Instance);
        let path = SamplePath::constant(5, &[0.4, -2.0, 0.1]);
        let mean = [1.0, 0.0, -0.5];
        for index in 0..BOUNDED_FAMILY_SIZE {
            let mut rng = Rng::from_key(key.child(index as u64));
            let spec = bounded_family_member(index, l, d, &mut rng);
            let audit = AtomicU64::new(0);
            let mut b = vec![0.0; d];
            let mut s = vec![0.0; d * d];
            for k in 0..5 {
                let ctx = StepCtx {
                    k,
                    s: 0.2 * k as f64,
                    dt: 0.2,
                    horizon: 0.8,
                    path: path.view(),
                    mean: &mean,
                };
                spec.drift_clamped(&ctx, 0.0, &mut b, &audit);
                spec.vol_clamped(&ctx, 0.0, &mut s, &audit);
                let bn = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let half_frob_sq = 0.5 * s.iter().map(|x| x * x).sum::<f64>();
                assert!(bn <= l + 1e-12, "member {index}: |b| = {bn} > {l}");
                assert!(half_frob_sq <= l + 1e-12, "member {index}: vol energy {half_frob_sq}");
            }
            assert_eq!(audit.load(Ordering::Relaxed), 0, "member {index} tripped the clamp");
        }
    }

    #[test]
    fn controlled_drift_uses_the_action() {
        let spec = DynamicsSpec::controlled_drift(ActionSet::Interval { lo: -1.0, hi: 1.0 }, 0.3);
        let path = SamplePath::constant(3, &[0.0]);
        let mean = [0.0];
        let ctx = ctx_on(&path, &mean);
        let audit = AtomicU64::new(0);
        let mut b = [0.0];
        spec.drift_clamped(&ctx, 0.7, &mut b, &audit);
        assert_eq!(b[0], 0.7);
    }
}
