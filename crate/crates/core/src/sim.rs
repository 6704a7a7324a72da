//! Interacting-particle simulation of controlled mean-field dynamics.
//!
//! [`simulate_mkv`] runs an explicit Euler scheme on the measure's own time
//! grid. Conditioning works by inheritance: the input cloud's paths up to the
//! conditioning time are kept bit-for-bit (bootstrap-resampled first if a
//! different particle count is requested) and only the remainder of the
//! horizon is simulated. Within a step every particle sees the same frozen
//! empirical mean, computed once in index order before the step runs, so
//! results do not depend on how rayon schedules the inner loop; noise comes
//! from one counter stream per (particle, step) pair, so they do not depend
//! on thread count either.
//!
//! [`sample_bounded_cloud`] drives the generator family from
//! [`crate::dynamics::bounded_family_member`] to produce test clouds around a
//! conditioning point, and [`moment_bound_check`] fits the short-horizon
//! moment growth of such clouds against the square-root-of-time law.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;

use crate::dynamics::{ActionSet, DynamicsSpec, StepCtx, BOUNDED_FAMILY_SIZE};
use crate::grid::PathView;
use crate::measure::PathMeasure;
use crate::policy::PiecewisePolicy;
use crate::rng::{Purpose, Rng, StreamKey};
use crate::stats::ols_fit;
use crate::{Error, Result};

/// Options for [`simulate_mkv`].
#[derive(Debug, Clone, Default)]
pub struct SimOpts {
    /// Record `sigma sigma^T` for every (particle, step); needed by the
    /// quadratic-variation convention that integrates coefficients instead of
    /// squaring increments.
    pub record_vol: bool,
}

/// Output of one simulation run.
#[derive(Debug)]
pub struct SimResult {
    /// The simulated cloud; agrees with the (resampled) input before the
    /// conditioning index.
    pub measure: PathMeasure,
    /// Grid index the simulation started from.
    pub start_index: usize,
    /// Row-major `sigma sigma^T` per (particle, step): entry
    /// `((i * steps + k) * d + r) * d + c`. Present iff requested.
    pub vol_qv: Option<Vec<f64>>,
    /// How many coefficient evaluations the bound projection actually moved.
    pub clamp_events: u64,
}

impl SimResult {
    /// `sigma sigma^T` for particle `i` over step `k`, as a row-major `d x d`
    /// slice.
    pub fn vol_qv_at(&self, i: usize, k: usize) -> &[f64] {
        let qv = self.vol_qv.as_ref().expect("volatility was not recorded");
        let d = self.measure.dim();
        let steps = self.measure.grid().steps();
        &qv[((i * steps + k) * d) * d..((i * steps + k) * d + d) * d]
    }
}

/// Simulate `n` interacting particles from time `t`, inheriting the input
/// cloud's past. `key` should already be scoped to the run (root plus any
/// instance children); noise, bootstrap and policy streams are derived from
/// it by purpose.
pub fn simulate_mkv(
    t: f64,
    mu: &PathMeasure,
    dynamics: &DynamicsSpec,
    policy: Option<&PiecewisePolicy>,
    n: usize,
    key: StreamKey,
    opts: &SimOpts,
) -> Result<SimResult> {
    let d = mu.dim();
    if dynamics.dim() != d {
        return Err(Error::Shape(format!(
            "dynamics in dimension {} applied to a {d}-dimensional cloud",
            dynamics.dim()
        )));
    }
    if n == 0 {
        return Err(Error::Config("need at least one particle".into()));
    }
    if policy.is_some() && dynamics.action_set == ActionSet::None {
        return Err(Error::Config("policy supplied for uncontrolled dynamics".into()));
    }
    let grid = mu.grid().clone();
    let k0 = grid.floor_index(t)?;
    if let Some(p) = policy {
        if p.stage_at(k0).is_none() {
            return Err(Error::Config(format!(
                "no policy stage governs the start index {k0}"
            )));
        }
    }

    // Inherit the past: clone or bootstrap-resample, then freeze the tail at
    // the conditioning index so the output is fully determined by this run.
    let mut out = if n == mu.len() {
        mu.clone()
    } else {
        let mut boot = Rng::from_key(key.purpose(Purpose::Bootstrap));
        mu.resample(n, &mut boot)?
    };
    out.stop_in_place(k0);

    let steps = grid.steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let horizon = grid.horizon();
    let noise_key = key.purpose(Purpose::Brownian);
    let clamps = AtomicU64::new(0);
    let bad_action: Mutex<Option<Error>> = Mutex::new(None);
    let diverged = AtomicUsize::new(usize::MAX);

    // Uniform stride keeps one code path: a single slot per particle when
    // recording is off, the full per-step block when it is on.
    let qv_stride = if opts.record_vol { steps * d * d } else { 1 };
    let mut vol_qv = vec![0.0f64; n * qv_stride];
    let mut actions = vec![0.0f64; n];
    let mut mean = vec![0.0f64; d];

    for k in k0..steps {
        out.mean_at(k, &mut mean);
        let mean_ref = &mean[..];
        let refresh = policy.map(|p| k == k0 || p.is_interval_start(k)).unwrap_or(false);

        out.particles_mut()
            .zip(actions.par_iter_mut())
            .zip(vol_qv.par_chunks_exact_mut(qv_stride))
            .enumerate()
            .for_each_init(
                || (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]),
                |(b, sig, z), (i, ((chunk, action), qv_chunk))| {
                    if diverged.load(Ordering::Relaxed) != usize::MAX {
                        return;
                    }
                    let view = PathView { d, values: chunk };
                    if refresh {
                        let p = policy.expect("refresh implies a policy");
                        let stage = p.stage_at(k).expect("checked before the loop");
                        let a = p.action(stage, &view);
                        if !dynamics.action_set.contains(a) {
                            let mut slot = bad_action.lock().expect("action mutex");
                            if slot.is_none() {
                                *slot = Some(Error::Domain(format!(
                                    "policy chose action {a} outside the admissible set \
                                     (particle {i}, index {k})"
                                )));
                            }
                            return;
                        }
                        *action = a;
                    }
                    let ctx = StepCtx { k, s: grid.time(k), dt, horizon, path: view, mean: mean_ref };
                    dynamics.drift_clamped(&ctx, *action, b, &clamps);
                    dynamics.vol_clamped(&ctx, *action, sig, &clamps);
                    if opts.record_vol {
                        let cell = &mut qv_chunk[k * d * d..(k + 1) * d * d];
                        for r in 0..d {
                            for c in 0..d {
                                let mut acc = 0.0;
                                for l in 0..d {
                                    acc += sig[r * d + l] * sig[c * d + l];
                                }
                                cell[r * d + c] = acc;
                            }
                        }
                    }
                    let mut rng = Rng::from_key(noise_key.child(i as u64).child(k as u64));
                    rng.fill_normal(z);
                    let (past, future) = chunk.split_at_mut((k + 1) * d);
                    let x = &past[k * d..];
                    let next = &mut future[..d];
                    let mut finite = true;
                    for r in 0..d {
                        let mut noise = 0.0;
                        for l in 0..d {
                            noise += sig[r * d + l] * z[l];
                        }
                        let v = x[r] + b[r] * dt + sqrt_dt * noise;
                        finite &= v.is_finite();
                        next[r] = v;
                    }
                    if !finite {
                        diverged.fetch_min(k, Ordering::Relaxed);
                    }
                },
            );

        if let Some(err) = bad_action.lock().expect("action mutex").take() {
            return Err(err);
        }
        let div = diverged.load(Ordering::Relaxed);
        if div != usize::MAX {
            return Err(Error::Diverged {
                step: div,
                msg: "a particle left the finite range during the Euler step".into(),
            });
        }
    }

    Ok(SimResult {
        measure: out,
        start_index: k0,
        vol_qv: opts.record_vol.then_some(vol_qv),
        clamp_events: clamps.load(Ordering::Relaxed),
    })
}

/// A cloud of measures sampled from the bounded generator family, all
/// agreeing with the conditioning measure before the conditioning time.
pub struct SampledCloud {
    pub measures: Vec<PathMeasure>,
    /// Which family member produced each measure.
    pub member_indices: Vec<usize>,
    /// Total bound-projection events across all runs; the family is built
    /// in-bounds, so anything nonzero is a bug in a member.
    pub clamp_events: u64,
}

/// Draw `count` measures from the bounded generator family with constants
/// `l`, each continuing `mu` past time `t` with the same initial particles.
/// Members are cycled in order; random members re-draw parameters per sample.
pub fn sample_bounded_cloud(
    t: f64,
    mu: &PathMeasure,
    l: f64,
    count: usize,
    key: StreamKey,
) -> Result<SampledCloud> {
    if count == 0 {
        return Err(Error::Config("need at least one sampled measure".into()));
    }
    if !(l > 0.0) {
        return Err(Error::Config(format!("generator bound must be positive (got {l})")));
    }
    let d = mu.dim();
    let mut measures = Vec::with_capacity(count);
    let mut member_indices = Vec::with_capacity(count);
    let mut clamp_events = 0;
    for j in 0..count {
        let member = j % BOUNDED_FAMILY_SIZE;
        let mut param_rng = Rng::from_key(key.purpose(Purpose::Instance).child(j as u64));
        let spec = crate::dynamics::bounded_family_member(member, l, d, &mut param_rng);
        let run = simulate_mkv(t, mu, &spec, None, mu.len(), key.child(j as u64), &SimOpts::default())?;
        clamp_events += run.clamp_events;
        measures.push(run.measure);
        member_indices.push(member);
    }
    Ok(SampledCloud { measures, member_indices, clamp_events })
}

/// Log-log fit of short-horizon moment growth.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// Window lengths used for the fit.
    pub deltas: Vec<f64>,
    /// Empirical `E sup_{s <= t + delta} |X_s - X_t|^p` per window.
    pub moments: Vec<f64>,
    /// Fitted exponent of `delta`; should approach `p / 2`.
    pub exponent: f64,
    /// Fitted multiplicative constant.
    pub constant: f64,
    /// The exponent the moment bound predicts.
    pub target_exponent: f64,
    /// Coefficient bound the cloud was generated under.
    pub generator_bound: f64,
}

/// Pool the running-sup increment moments of `measures` after time `t` over
/// dyadic windows and fit `E sup |X - X_t|^p ~ C * delta^(p/2)`. `l` is the
/// coefficient bound the cloud was generated under; it is echoed into the
/// report so the fitted constant can be read against it.
pub fn moment_bound_check(
    measures: &[PathMeasure],
    t: f64,
    l: f64,
    p: f64,
) -> Result<MomentReport> {
    if measures.is_empty() {
        return Err(Error::Config("need at least one measure".into()));
    }
    if !(p > 0.0) {
        return Err(Error::Config(format!("moment order must be positive (got {p})")));
    }
    let grid = measures[0].grid().clone();
    let d = measures[0].dim();
    let k0 = grid.floor_index(t)?;
    let avail = grid.steps() - k0;
    if avail < 2 {
        return Err(Error::Config("conditioning time leaves no window to fit on".into()));
    }
    for m in measures {
        if m.grid() != &grid || m.dim() != d {
            return Err(Error::Shape("measures must share one grid and dimension".into()));
        }
    }

    // Dyadic windows: 1, 2, 4, ... steps past the conditioning index.
    let mut widths = Vec::new();
    let mut w = 1usize;
    while w <= avail {
        widths.push(w);
        w *= 2;
    }

    let total_particles: usize = measures.iter().map(|m| m.len()).sum();
    let mut moments = vec![0.0f64; widths.len()];
    for m in measures {
        for i in 0..m.len() {
            let base = m.point(i, k0);
            let mut running_sup = 0.0f64;
            let mut next = 0usize;
            for (j, &width) in widths.iter().enumerate() {
                while next < width {
                    next += 1;
                    let pt = m.point(i, k0 + next);
                    let dist_sq: f64 =
                        pt.iter().zip(base).map(|(a, b)| (a - b) * (a - b)).sum();
                    running_sup = running_sup.max(dist_sq);
                }
                moments[j] += running_sup.sqrt().powf(p);
            }
        }
    }
    for v in moments.iter_mut() {
        *v /= total_particles as f64;
    }

    let deltas: Vec<f64> = widths.iter().map(|&w| w as f64 * grid.dt()).collect();
    let mut log_d = Vec::new();
    let mut log_m = Vec::new();
    for (&delta, &m) in deltas.iter().zip(&moments) {
        if m > 0.0 {
            log_d.push(delta.ln());
            log_m.push(m.ln());
        }
    }
    if log_d.len() < 2 {
        return Err(Error::Numerics(
            "moment sequence is degenerate; nothing to fit".into(),
        ));
    }
    let (slope, intercept) = ols_fit(&log_d, &log_m);
    Ok(MomentReport {
        deltas,
        moments,
        exponent: slope,
        constant: intercept.exp(),
        target_exponent: p / 2.0,
        generator_bound: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::policy::{PiecewisePolicy, Stage};

    fn delta_at_zero(d: usize, n: usize, steps: usize) -> PathMeasure {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        PathMeasure::from_initial_states(grid, d, &vec![0.0; n * d]).unwrap()
    }

    fn key() -> StreamKey {
        StreamKey::root(7)
    }

    #[test]
    fn frozen_dynamics_return_the_input_exactly() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mu = PathMeasure::from_initial_states(grid, 1, &[0.5, -1.5, 2.0]).unwrap();
        let run = simulate_mkv(0.0, &mu, &DynamicsSpec::frozen(1), None, 3, key(), &SimOpts::default())
            .unwrap();
        assert_eq!(run.measure.raw(), mu.raw());
        assert_eq!(run.clamp_events, 0);
    }

    #[test]
    fn unit_drift_tracks_time_exactly() {
        let mu = delta_at_zero(1, 4, 20);
        let dynamics = DynamicsSpec::constant(vec![1.0], 0.0);
        let run = simulate_mkv(0.0, &mu, &dynamics, None, 4, key(), &SimOpts::default()).unwrap();
        for i in 0..4 {
            for k in 0..=20 {
                let t = run.measure.grid().time(k);
                assert!(
                    (run.measure.scalar(i, k) - t).abs() < 1e-12,
                    "particle {i} at index {k}"
                );
            }
        }
    }

    #[test]
    fn brownian_terminal_second_moment_matches_d_times_t() {
        let d = 2;
        let mu = delta_at_zero(d, 20_000, 50);
        let run =
            simulate_mkv(0.0, &mu, &DynamicsSpec::brownian(d), None, 20_000, key(), &SimOpts::default())
                .unwrap();
        let steps = run.measure.grid().steps();
        let m2 = run.measure.expectation_at(steps, |x| x.iter().map(|v| v * v).sum());
        assert!((m2 - 2.0).abs() < 0.1, "E|X_T|^2 = {m2}, want 2");
    }

    #[test]
    fn conditioning_keeps_the_past_bit_for_bit() {
        // Build a nontrivial past by simulating, then continue from t = 0.5
        // with different dynamics and check [0, t] survives untouched.
        let mu = delta_at_zero(1, 64, 20);
        let past =
            simulate_mkv(0.0, &mu, &DynamicsSpec::brownian(1), None, 64, key(), &SimOpts::default())
                .unwrap()
                .measure;
        let cont = simulate_mkv(
            0.5,
            &past,
            &DynamicsSpec::constant(vec![2.0], 0.3),
            None,
            64,
            key().child(1),
            &SimOpts::default(),
        )
        .unwrap();
        assert_eq!(cont.start_index, 10);
        for i in 0..64 {
            for k in 0..=10 {
                assert_eq!(cont.measure.scalar(i, k).to_bits(), past.scalar(i, k).to_bits());
            }
            // And the tail actually moved.
            assert_ne!(cont.measure.scalar(i, 20).to_bits(), past.scalar(i, 20).to_bits());
        }
        // Only the window [t, T] is re-simulated, so the run is also
        // insensitive to the input's tail: stopping the input first changes
        // nothing.
        let stopped = past.stop(10);
        let cont2 = simulate_mkv(
            0.5,
            &stopped,
            &DynamicsSpec::constant(vec![2.0], 0.3),
            None,
            64,
            key().child(1),
            &SimOpts::default(),
        )
        .unwrap();
        assert_eq!(cont.measure.raw(), cont2.measure.raw());
    }

    #[test]
    fn bootstrap_resampling_reuses_input_segments() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let mu = PathMeasure::from_initial_states(grid, 1, &[1.0, 2.0, 3.0]).unwrap();
        let run = simulate_mkv(0.0, &mu, &DynamicsSpec::frozen(1), None, 37, key(), &SimOpts::default())
            .unwrap();
        assert_eq!(run.measure.len(), 37);
        let originals = [1.0, 2.0, 3.0];
        let mut seen = [false; 3];
        for i in 0..37 {
            let x = run.measure.scalar(i, 0);
            let pos = originals.iter().position(|&o| o == x).expect("resampled from inputs");
            seen[pos] = true;
        }
        assert!(seen.iter().all(|&s| s), "37 draws should hit all three atoms");
    }

    #[test]
    fn identical_results_across_thread_counts() {
        let mu = delta_at_zero(2, 256, 25);
        let run_with = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                simulate_mkv(
                    0.0,
                    &mu,
                    &DynamicsSpec::brownian(2),
                    None,
                    256,
                    key(),
                    &SimOpts { record_vol: true },
                )
                .unwrap()
            })
        };
        let a = run_with(1);
        let b = run_with(4);
        assert_eq!(a.measure.raw(), b.measure.raw());
        assert_eq!(a.vol_qv.unwrap(), b.vol_qv.unwrap());
    }

    #[test]
    fn policies_steer_the_drift_and_are_validated() {
        let mu = delta_at_zero(1, 8, 10);
        let dynamics = DynamicsSpec::controlled_drift(ActionSet::Interval { lo: -1.0, hi: 1.0 }, 0.0);
        // Constant action 1 on [0, 0.5), then -1: X_T = 0.
        let policy = PiecewisePolicy::new(
            vec![0, 5],
            vec![Stage::Const(1.0), Stage::Const(-1.0)],
        )
        .unwrap();
        let run = simulate_mkv(0.0, &mu, &dynamics, Some(&policy), 8, key(), &SimOpts::default())
            .unwrap();
        assert!((run.measure.scalar(0, 5) - 0.5).abs() < 1e-12);
        assert!(run.measure.scalar(0, 10).abs() < 1e-12);

        // Action outside the admissible interval is a domain error.
        let bad = PiecewisePolicy::constant(0, 2.0);
        let err = simulate_mkv(0.0, &mu, &dynamics, Some(&bad), 8, key(), &SimOpts::default());
        assert!(matches!(err, Err(Error::Domain(_))), "{err:?}");

        // A policy on uncontrolled dynamics is a configuration error.
        let err =
            simulate_mkv(0.0, &mu, &DynamicsSpec::frozen(1), Some(&policy), 8, key(), &SimOpts::default());
        assert!(matches!(err, Err(Error::Config(_))), "{err:?}");
    }

    #[test]
    fn divergence_reports_the_step() {
        let mu = delta_at_zero(1, 4, 10);
        let dynamics = DynamicsSpec::new(
            1,
            ActionSet::None,
            DynamicsSpec::LOOSE_BOUND,
            DynamicsSpec::LOOSE_BOUND,
            Box::new(|ctx, _a, out| out[0] = if ctx.k >= 3 { f64::NAN } else { 0.0 }),
            Box::new(|_ctx, _a, out| out[0] = 0.0),
        )
        .unwrap();
        match simulate_mkv(0.0, &mu, &dynamics, None, 4, key(), &SimOpts::default()) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn recorded_vol_is_sigma_sigma_transpose() {
        let mu = delta_at_zero(1, 2, 4);
        let dynamics = DynamicsSpec::constant(vec![0.0], 0.7);
        let run = simulate_mkv(0.0, &mu, &dynamics, None, 2, key(), &SimOpts { record_vol: true })
            .unwrap();
        for i in 0..2 {
            for k in 0..4 {
                assert!((run.vol_qv_at(i, k)[0] - 0.49).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sampled_cloud_shares_the_past_and_never_clamps() {
        let mu = delta_at_zero(1, 32, 20);
        let past =
            simulate_mkv(0.0, &mu, &DynamicsSpec::brownian(1), None, 32, key(), &SimOpts::default())
                .unwrap()
                .measure;
        let cloud = sample_bounded_cloud(0.5, &past, 2.0, 10, key().child(9)).unwrap();
        assert_eq!(cloud.measures.len(), 10);
        assert_eq!(cloud.clamp_events, 0);
        assert_eq!(cloud.member_indices[0], 0);
        assert_eq!(cloud.member_indices[8], 0);
        let stopped = past.stop(10);
        // Member 0 freezes the paths; every member keeps the past.
        assert_eq!(cloud.measures[0].raw(), stopped.raw());
        for m in &cloud.measures {
            for i in 0..32 {
                for k in 0..=10 {
                    assert_eq!(m.scalar(i, k).to_bits(), past.scalar(i, k).to_bits());
                }
            }
        }
    }

    #[test]
    fn moment_growth_of_brownian_windows_fits_the_square_root_law() {
        let mu = delta_at_zero(1, 4_000, 256);
        let run =
            simulate_mkv(0.0, &mu, &DynamicsSpec::brownian(1), None, 4_000, key(), &SimOpts::default())
                .unwrap();
        let report = moment_bound_check(&[run.measure], 0.0, 1.0, 2.0).unwrap();
        assert_eq!(report.target_exponent, 1.0);
        assert!(
            (report.exponent - 1.0).abs() < 0.15,
            "fitted exponent {} should be near 1",
            report.exponent
        );
        // E sup_{s <= delta} |B_s|^2 = C * delta with C in [1, 4] (Doob).
        assert!(report.constant > 0.8 && report.constant < 4.5, "constant {}", report.constant);
    }

    #[test]
    fn mean_field_term_is_visible_to_coefficients() {
        // Drift equal to the empirical mean: with atoms at -1 and +1 the mean
        // is 0 at every step, so the paths stay put; with atoms at 0 and 2 the
        // mean starts at 1 and the whole cloud accelerates.
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let dynamics = DynamicsSpec::new(
            1,
            ActionSet::None,
            DynamicsSpec::LOOSE_BOUND,
            DynamicsSpec::LOOSE_BOUND,
            Box::new(|ctx, _a, out| out[0] = ctx.mean[0]),
            Box::new(|_ctx, _a, out| out[0] = 0.0),
        )
        .unwrap();
        let balanced = PathMeasure::from_initial_states(grid.clone(), 1, &[-1.0, 1.0]).unwrap();
        let run = simulate_mkv(0.0, &balanced, &dynamics, None, 2, key(), &SimOpts::default()).unwrap();
        assert_eq!(run.measure.scalar(0, 10), -1.0);
        assert_eq!(run.measure.scalar(1, 10), 1.0);

        let shifted = PathMeasure::from_initial_states(grid, 1, &[0.0, 2.0]).unwrap();
        let run = simulate_mkv(0.0, &shifted, &dynamics, None, 2, key(), &SimOpts::default()).unwrap();
        // dm/ds = m: the mean follows the Euler compounding of e^s.
        let expect = (1.0f64 + 0.1).powi(10);
        let mean_t = 0.5 * (run.measure.scalar(0, 10) + run.measure.scalar(1, 10));
        assert!((mean_t - expect).abs() < 1e-12, "{mean_t} vs {expect}");
    }
}
