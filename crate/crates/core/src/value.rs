//! Closed-loop value estimation, policy search, and dynamic-programming
//! residuals.
//!
//! Values are estimated by simulating the controlled interacting-particle
//! system and averaging path costs; every estimate carries a standard error
//! from independent macro-replications, so downstream comparisons can state
//! how many standard errors separate two numbers. Search selects a winner on
//! one stream and re-evaluates it on a disjoint stream, so the reported value
//! does not inherit the selection's upward bias.

use std::sync::Arc;

use rayon::prelude::*;

use crate::dynamics::DynamicsSpec;
use crate::grid::PathView;
use crate::measure::PathMeasure;
use crate::policy::{FeedbackTable, PiecewisePolicy, Stage};
use crate::rng::{Purpose, Rng, StreamKey};
use crate::sim::{simulate_mkv, SimOpts, SimResult};
use crate::stats::mean_and_stderr;
use crate::{Error, Result};

/// Average terminal cost of a simulated cloud. The estimator hands the whole
/// terminal measure to the cost, so mean-field terms (variances, moment
/// combinations) are computed from the same particles that were simulated.
pub type TerminalCost = Arc<dyn Fn(&PathMeasure) -> f64 + Sync + Send>;

/// Running cost rate evaluated at (grid index, time, path, cloud, action),
/// integrated with left endpoints. Implementations must not read the path or
/// the cloud beyond the given index.
pub type RunningCost =
    Arc<dyn Fn(usize, f64, PathView<'_>, &PathMeasure, f64) -> f64 + Sync + Send>;

/// Average a per-path terminal cost over the cloud.
pub fn pathwise_terminal(
    g: impl Fn(PathView<'_>) -> f64 + Sync + Send + 'static,
) -> TerminalCost {
    Arc::new(move |m| (0..m.len()).map(|i| g(m.path(i))).sum::<f64>() / m.len() as f64)
}

/// One controlled problem: dynamics plus costs.
pub struct ControlInstance {
    pub name: String,
    pub dynamics: DynamicsSpec,
    pub terminal: TerminalCost,
    pub running: Option<RunningCost>,
}

impl ControlInstance {
    pub fn new(name: impl Into<String>, dynamics: DynamicsSpec, terminal: TerminalCost) -> Self {
        ControlInstance { name: name.into(), dynamics, terminal, running: None }
    }

    pub fn with_running(mut self, f: RunningCost) -> Self {
        self.running = Some(f);
        self
    }
}

/// Monte Carlo value of one policy, with its provenance.
#[derive(Debug, Clone)]
pub struct ValueEstimate {
    pub mean: f64,
    /// Standard error of `mean` across macro-replications.
    pub stderr: f64,
    pub macro_reps: usize,
    pub particles: usize,
    /// Index of the winning policy in the searched space (search results only).
    pub policy_index: Option<usize>,
    /// Estimate on the selection stream the winner was chosen by. The
    /// headline `mean` comes from a fresh stream, so enlarging a candidate
    /// space can only raise `search_value`, while `mean` stays unbiased.
    pub search_value: Option<f64>,
}

/// Simulation sizes for one value estimate.
#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub particles: usize,
    /// Independent macro-replications; at least 8, so the standard error is
    /// itself trustworthy.
    pub macro_reps: usize,
}

impl Default for EvalOpts {
    fn default() -> Self {
        EvalOpts { particles: 4096, macro_reps: 8 }
    }
}

/// Running-cost integral of an already-simulated cloud over `[from, to)`,
/// replaying the policy's actions (stages re-read only the committed past, so
/// the replay reproduces the in-simulation actions exactly).
fn running_cost_segment(
    m: &PathMeasure,
    inst: &ControlInstance,
    policy: &PiecewisePolicy,
    from: usize,
    to: usize,
) -> Result<f64> {
    let Some(f) = &inst.running else { return Ok(0.0) };
    let grid = m.grid();
    let dt = grid.dt();
    let n = m.len() as f64;
    let mut total = 0.0;
    for k in from..to {
        let s = grid.time(k);
        let stage = policy.stage_at(k).ok_or_else(|| {
            Error::Config(format!("no policy stage governs index {k} in the cost integral"))
        })?;
        let mut acc = 0.0;
        for i in 0..m.len() {
            let path = m.path(i);
            let a = policy.action(stage, &path);
            acc += f(k, s, path, m, a);
        }
        total += dt * acc / n;
    }
    Ok(total)
}

/// Total cost of one simulated run under the policy that produced it.
fn run_cost(run: &SimResult, inst: &ControlInstance, policy: &PiecewisePolicy) -> Result<f64> {
    let m = &run.measure;
    let total = (inst.terminal)(m)
        + running_cost_segment(m, inst, policy, run.start_index, m.grid().steps())?;
    if !total.is_finite() {
        return Err(Error::Numerics(format!("cost diverged on instance {}", inst.name)));
    }
    Ok(total)
}

/// Estimate the value of one policy from `(t, mu)` by simulating
/// `macro_reps` independent clouds and averaging their costs.
pub fn evaluate_policy(
    t: f64,
    mu: &PathMeasure,
    inst: &ControlInstance,
    policy: &PiecewisePolicy,
    opts: &EvalOpts,
    key: StreamKey,
) -> Result<ValueEstimate> {
    if opts.macro_reps < 8 {
        return Err(Error::Config(format!(
            "need at least 8 macro-replications for a trustworthy standard error, got {}",
            opts.macro_reps
        )));
    }
    if opts.particles == 0 {
        return Err(Error::Config("need at least one particle per replication".into()));
    }
    let vals = (0..opts.macro_reps)
        .map(|r| {
            let run = simulate_mkv(
                t,
                mu,
                &inst.dynamics,
                Some(policy),
                opts.particles,
                key.child(r as u64),
                &SimOpts::default(),
            )?;
            run_cost(&run, inst, policy)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, stderr) = mean_and_stderr(&vals);
    Ok(ValueEstimate {
        mean,
        stderr,
        macro_reps: opts.macro_reps,
        particles: opts.particles,
        policy_index: None,
        search_value: None,
    })
}

/// Search sizes: candidate evaluations are capped by the shared budget.
#[derive(Debug, Clone)]
pub struct SearchOpts {
    pub eval: EvalOpts,
    /// Maximum number of candidate evaluations (truncates enumerations).
    pub budget: usize,
}

impl Default for SearchOpts {
    fn default() -> Self {
        SearchOpts { eval: EvalOpts::default(), budget: 256 }
    }
}

/// Best policy in an explicit finite space, by estimated value.
///
/// Candidate `j` is always scored on the same per-index stream, so appending
/// candidates never changes existing scores and the selection maximum is
/// monotone in the space. Ties go to the lowest index. The winner's reported
/// estimate comes from a fresh stream disjoint from every selection stream.
pub fn optimize_value(
    t: f64,
    mu: &PathMeasure,
    inst: &ControlInstance,
    policies: &[PiecewisePolicy],
    opts: &SearchOpts,
    key: StreamKey,
) -> Result<(usize, ValueEstimate)> {
    if policies.is_empty() {
        return Err(Error::Config("policy space is empty".into()));
    }
    if opts.budget == 0 {
        return Err(Error::Config("search budget is zero".into()));
    }
    let m = policies.len().min(opts.budget);
    let search_key = key.purpose(Purpose::PolicySearch);
    let scores = (0..m)
        .into_par_iter()
        .map(|j| {
            evaluate_policy(t, mu, inst, &policies[j], &opts.eval, search_key.child(j as u64))
                .map(|e| e.mean)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for j in 1..m {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    let mut est =
        evaluate_policy(t, mu, inst, &policies[best], &opts.eval, key.purpose(Purpose::FinalEval))?;
    est.policy_index = Some(best);
    est.search_value = Some(scores[best]);
    Ok((best, est))
}

/// Shape of a single-stage binned-table search: fixed observation indices and
/// edges, one action per cell drawn from a finite menu.
#[derive(Debug, Clone)]
pub struct TableTemplate {
    pub start_index: usize,
    pub obs_indices: Vec<usize>,
    pub edges: Vec<Vec<f64>>,
    pub menu: Vec<f64>,
}

impl TableTemplate {
    pub fn cells(&self) -> usize {
        self.edges.iter().map(|e| e.len() + 1).product()
    }

    pub fn policy(&self, actions: Vec<f64>) -> Result<PiecewisePolicy> {
        let table = FeedbackTable::new(self.obs_indices.clone(), self.edges.clone(), actions)?;
        PiecewisePolicy::new(vec![self.start_index], vec![Stage::Table(table)])
    }
}

/// Coordinate ascent over one table's cells with random restarts, spending at
/// most `budget` candidate evaluations. All candidates share one selection
/// stream (common random numbers), so comparisons along the ascent are exact;
/// the winner is re-evaluated on a fresh stream like `optimize_value`.
pub fn ascend_table(
    t: f64,
    mu: &PathMeasure,
    inst: &ControlInstance,
    template: &TableTemplate,
    opts: &SearchOpts,
    key: StreamKey,
) -> Result<(PiecewisePolicy, ValueEstimate)> {
    if template.menu.is_empty() {
        return Err(Error::Config("action menu is empty".into()));
    }
    if opts.budget == 0 {
        return Err(Error::Config("search budget is zero".into()));
    }
    let cells = template.cells();
    let search_key = key.purpose(Purpose::PolicySearch);
    let mut restart_rng = Rng::from_key(search_key.child(u64::MAX));
    let mut spent = 0usize;
    let score = |actions: &[f64], spent: &mut usize| -> Result<f64> {
        *spent += 1;
        let policy = template.policy(actions.to_vec())?;
        Ok(evaluate_policy(t, mu, inst, &policy, &opts.eval, search_key)?.mean)
    };

    let mut best_actions: Vec<f64> = Vec::new();
    let mut best_score = f64::NEG_INFINITY;
    'restarts: loop {
        let mut current: Vec<f64> = if best_actions.is_empty() {
            vec![template.menu[0]; cells]
        } else {
            (0..cells).map(|_| template.menu[restart_rng.index(template.menu.len())]).collect()
        };
        let mut current_score = score(&current, &mut spent)?;
        let mut improved = true;
        while improved && spent < opts.budget {
            improved = false;
            for cell in 0..cells {
                for mi in 0..template.menu.len() {
                    let a = template.menu[mi];
                    if a == current[cell] {
                        continue;
                    }
                    if spent >= opts.budget {
                        break;
                    }
                    let prev = current[cell];
                    current[cell] = a;
                    let v = score(&current, &mut spent)?;
                    if v > current_score {
                        current_score = v;
                        improved = true;
                    } else {
                        current[cell] = prev;
                    }
                }
            }
        }
        if current_score > best_score {
            best_score = current_score;
            best_actions = current;
        }
        if spent >= opts.budget {
            break 'restarts;
        }
    }

    let policy = template.policy(best_actions)?;
    let mut est = evaluate_policy(t, mu, inst, &policy, &opts.eval, key.purpose(Purpose::FinalEval))?;
    est.search_value = Some(best_score);
    Ok((policy, est))
}

/// All single-stage constant policies over the given action list.
pub fn constant_policies(k0: usize, actions: &[f64]) -> Vec<PiecewisePolicy> {
    actions.iter().map(|&a| PiecewisePolicy::constant(k0, a)).collect()
}

/// Single-stage sign table: observe index `k_obs`, play `a_neg` when the
/// state is at most zero and `a_pos` above.
pub fn sign_policy(k0: usize, k_obs: usize, a_neg: f64, a_pos: f64) -> Result<PiecewisePolicy> {
    let table = FeedbackTable::new(vec![k_obs], vec![vec![0.0]], vec![a_neg, a_pos])?;
    PiecewisePolicy::new(vec![k0], vec![Stage::Table(table)])
}

/// Sizes for the split-horizon comparison.
#[derive(Debug, Clone)]
pub struct DppOpts {
    pub eval: EvalOpts,
    pub budget: usize,
    /// Independent first-stage replications feeding the second stage.
    pub stage1_reps: usize,
}

impl Default for DppOpts {
    fn default() -> Self {
        DppOpts { eval: EvalOpts::default(), budget: 256, stage1_reps: 8 }
    }
}

/// Split-horizon comparison report.
#[derive(Debug)]
pub struct DppReport {
    /// `V(t1, mu) - sup over stage-1 candidates of [V(t2, glued cloud) +
    /// stage-1 running cost]`.
    pub residual: f64,
    /// Combined standard error of the two sides.
    pub stderr: f64,
    pub lhs: ValueEstimate,
    pub rhs_value: f64,
    pub rhs_stderr: f64,
    pub best_stage1: usize,
    /// Right-hand value per stage-1 candidate (mean over replications).
    pub rhs_by_candidate: Vec<f64>,
}

/// Compare the value over `[t1, T]` against its two-stage recomposition.
///
/// The left side searches `lhs_space` from `(t1, mu)`. The right side runs
/// each stage-1 candidate to the split time and hands the simulated particle
/// cloud itself — not a re-fitted law — to the second-stage search over
/// `stage2_space`, adding the stage-1 running cost. Both sides use the same
/// evaluation sizes. When `lhs_space` is exactly the gluings of the two
/// stage spaces, the residual is a Monte Carlo zero; restricting `lhs_space`
/// to a poorer information class drives it strictly negative.
pub fn dpp_residual(
    t1: f64,
    t2: f64,
    mu: &PathMeasure,
    inst: &ControlInstance,
    lhs_space: &[PiecewisePolicy],
    stage1_space: &[PiecewisePolicy],
    stage2_space: &[PiecewisePolicy],
    opts: &DppOpts,
    key: StreamKey,
) -> Result<DppReport> {
    let grid = mu.grid();
    let k1 = grid.floor_index(t1)?;
    let k2 = grid.floor_index(t2)?;
    if k2 <= k1 {
        return Err(Error::Config(format!(
            "split time {t2} does not follow the start {t1} on the grid"
        )));
    }
    if lhs_space.is_empty() || stage1_space.is_empty() || stage2_space.is_empty() {
        return Err(Error::Config("all three policy spaces must be nonempty".into()));
    }
    if opts.stage1_reps < 2 {
        return Err(Error::Config("need at least 2 first-stage replications".into()));
    }

    let search = SearchOpts { eval: opts.eval.clone(), budget: opts.budget };
    let (_, lhs) = optimize_value(t1, mu, inst, lhs_space, &search, key.purpose(Purpose::DppLhs))?;

    let rhs_key = key.purpose(Purpose::DppRhs);
    let m1 = stage1_space.len().min(opts.budget.max(1));
    let per_candidate = (0..m1)
        .into_par_iter()
        .map(|j| -> Result<(f64, f64)> {
            let cand_key = rhs_key.child(j as u64);
            let mut vals = Vec::with_capacity(opts.stage1_reps);
            for r in 0..opts.stage1_reps {
                let rep_key = cand_key.child(r as u64);
                let run = simulate_mkv(
                    t1,
                    mu,
                    &inst.dynamics,
                    Some(&stage1_space[j]),
                    opts.eval.particles,
                    rep_key,
                    &SimOpts::default(),
                )?;
                let cost1 =
                    running_cost_segment(&run.measure, inst, &stage1_space[j], k1, k2)?;
                let (_, v2) = optimize_value(
                    t2,
                    &run.measure,
                    inst,
                    stage2_space,
                    &search,
                    rep_key.child(1),
                )?;
                vals.push(v2.mean + cost1);
            }
            Ok(mean_and_stderr(&vals))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for j in 1..m1 {
        if per_candidate[j].0 > per_candidate[best].0 {
            best = j;
        }
    }
    let (rhs_value, rhs_stderr) = per_candidate[best];
    let residual = lhs.mean - rhs_value;
    let stderr = (lhs.stderr * lhs.stderr + rhs_stderr * rhs_stderr).sqrt();
    Ok(DppReport {
        residual,
        stderr,
        lhs,
        rhs_value,
        rhs_stderr,
        best_stage1: best,
        rhs_by_candidate: per_candidate.iter().map(|c| c.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ActionSet;
    use crate::grid::TimeGrid;

    fn delta_zero(steps: usize, horizon: f64, n: usize) -> PathMeasure {
        let grid = TimeGrid::new(horizon, steps).unwrap();
        PathMeasure::from_initial_states(grid, 1, &vec![0.0; n]).unwrap()
    }

    fn drift_instance(sigma: f64, terminal: TerminalCost) -> ControlInstance {
        let dyn_ = DynamicsSpec::controlled_drift(
            ActionSet::Interval { lo: -1.0, hi: 1.0 },
            sigma,
        );
        ControlInstance::new("drift-test", dyn_, terminal)
    }

    fn key(seed: u64) -> StreamKey {
        StreamKey::root(seed)
    }

    #[test]
    fn zero_costs_give_an_exact_zero_with_zero_stderr() {
        let mu = delta_zero(16, 1.0, 64);
        let inst = drift_instance(1.0, pathwise_terminal(|_p| 0.0));
        let est = evaluate_policy(
            0.0,
            &mu,
            &inst,
            &PiecewisePolicy::constant(0, 0.0),
            &EvalOpts { particles: 64, macro_reps: 8 },
            key(1),
        )
        .unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn constant_drift_without_noise_integrates_exactly() {
        // b = a, sigma = 0: X_T = a * T for every particle, so the terminal
        // mean is deterministic and the running integral of f = a adds a * T.
        let mu = delta_zero(20, 1.0, 32);
        let inst = drift_instance(0.0, pathwise_terminal(|p| p.terminal()[0]))
            .with_running(Arc::new(|_k, _s, _p, _m, a| a));
        let policy = PiecewisePolicy::constant(0, 0.5);
        let est = evaluate_policy(
            0.0,
            &mu,
            &inst,
            &policy,
            &EvalOpts { particles: 32, macro_reps: 8 },
            key(2),
        )
        .unwrap();
        assert!((est.mean - 1.0).abs() < 1e-12, "0.5 from the state, 0.5 from f: {}", est.mean);
        assert!(est.stderr < 1e-13);
    }

    #[test]
    fn macro_replication_floor_is_enforced() {
        let mu = delta_zero(4, 1.0, 8);
        let inst = drift_instance(1.0, pathwise_terminal(|_p| 0.0));
        let err = evaluate_policy(
            0.0,
            &mu,
            &inst,
            &PiecewisePolicy::constant(0, 0.0),
            &EvalOpts { particles: 8, macro_reps: 4 },
            key(3),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn search_prefers_the_best_constant_and_is_monotone_in_the_space() {
        // Terminal mean state under b = a, sigma = 0 is a * T: ordering of
        // constants is exact, and enlarging the space can only help.
        let mu = delta_zero(10, 1.0, 16);
        let inst = drift_instance(0.0, pathwise_terminal(|p| p.terminal()[0]));
        let space = constant_policies(0, &[-1.0, 0.0, 0.3, 0.9]);
        let opts = SearchOpts { eval: EvalOpts { particles: 16, macro_reps: 8 }, budget: 64 };

        let (best_small, est_small) =
            optimize_value(0.0, &mu, &inst, &space[..2], &opts, key(4)).unwrap();
        assert_eq!(best_small, 1);
        let (best_full, est_full) =
            optimize_value(0.0, &mu, &inst, &space, &opts, key(4)).unwrap();
        assert_eq!(best_full, 3);
        assert!((est_full.mean - 0.9).abs() < 1e-12);
        assert!(est_full.search_value.unwrap() >= est_small.search_value.unwrap());

        // Same key, same space: bit-identical result.
        let (_, est_again) = optimize_value(0.0, &mu, &inst, &space, &opts, key(4)).unwrap();
        assert_eq!(est_again.mean.to_bits(), est_full.mean.to_bits());
    }

    #[test]
    fn exact_ties_resolve_to_the_lowest_index() {
        let mu = delta_zero(8, 1.0, 16);
        let inst = drift_instance(1.0, pathwise_terminal(|_p| 0.0));
        let space = constant_policies(0, &[-0.5, 0.5, 0.0]);
        let opts = SearchOpts { eval: EvalOpts { particles: 16, macro_reps: 8 }, budget: 8 };
        let (best, est) = optimize_value(0.0, &mu, &inst, &space, &opts, key(5)).unwrap();
        assert_eq!(best, 0, "all values are exactly zero, so index 0 must win");
        assert_eq!(est.policy_index, Some(0));
    }

    #[test]
    fn empty_spaces_and_zero_budgets_are_configuration_errors() {
        let mu = delta_zero(8, 1.0, 8);
        let inst = drift_instance(1.0, pathwise_terminal(|_p| 0.0));
        let err = optimize_value(0.0, &mu, &inst, &[], &SearchOpts::default(), key(6)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let space = constant_policies(0, &[0.0]);
        let opts = SearchOpts { eval: EvalOpts::default(), budget: 0 };
        let err = optimize_value(0.0, &mu, &inst, &space, &opts, key(6)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn coordinate_ascent_finds_the_noise_free_optimum() {
        // g = -(x - 0.7)^2 with b = a, sigma = 0 over T = 1: the best action
        // on the menu is 0.5, and ascent must land exactly there.
        let mu = delta_zero(10, 1.0, 8);
        let inst =
            drift_instance(0.0, pathwise_terminal(|p| -(p.terminal()[0] - 0.7).powi(2)));
        let template = TableTemplate {
            start_index: 0,
            obs_indices: vec![],
            edges: vec![],
            menu: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
        };
        let opts = SearchOpts { eval: EvalOpts { particles: 8, macro_reps: 8 }, budget: 40 };
        let (policy, est) = ascend_table(0.0, &mu, &inst, &template, &opts, key(7)).unwrap();
        assert!((est.mean - -(0.5f64 - 0.7).powi(2)).abs() < 1e-12, "got {}", est.mean);
        match &policy.stages()[0] {
            Stage::Table(t) => assert_eq!(t.actions, vec![0.5]),
            other => panic!("expected a table stage, got {other:?}"),
        }
    }

    #[test]
    fn glued_policies_switch_stages_at_the_second_start() {
        let first = PiecewisePolicy::constant(0, 1.0);
        let second = PiecewisePolicy::constant(5, -1.0);
        let glued = first.then(&second).unwrap();
        assert_eq!(glued.interval_starts(), &[0, 5]);
        let path = crate::grid::SamplePath::constant(8, &[0.0]);
        assert_eq!(glued.action(glued.stage_at(4).unwrap(), &path.view()), 1.0);
        assert_eq!(glued.action(glued.stage_at(5).unwrap(), &path.view()), -1.0);

        let err = second.then(&first).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn noise_free_split_recomposes_the_value_exactly() {
        // b = a, sigma = 0, g = X_T from a point mass: both sides of the
        // split evaluate to max(a1) * t2 + max(a2) * (T - t2) with no noise,
        // so the residual is exactly zero with zero standard error.
        let mu = delta_zero(20, 1.0, 16);
        let inst = drift_instance(0.0, pathwise_terminal(|p| p.terminal()[0]));
        let actions = [-1.0, 0.0, 1.0];
        let stage1 = constant_policies(0, &actions);
        let stage2 = constant_policies(10, &actions);
        let mut lhs = Vec::new();
        for s1 in &stage1 {
            for s2 in &stage2 {
                lhs.push(s1.then(s2).unwrap());
            }
        }
        let opts = DppOpts {
            eval: EvalOpts { particles: 16, macro_reps: 8 },
            budget: 64,
            stage1_reps: 2,
        };
        let report =
            dpp_residual(0.0, 0.5, &mu, &inst, &lhs, &stage1, &stage2, &opts, key(8)).unwrap();
        assert!(report.residual.abs() < 1e-12, "residual {}", report.residual);
        assert!(report.stderr < 1e-13);
        assert_eq!(report.best_stage1, 2);
        assert_eq!(report.rhs_by_candidate.len(), 3);
    }

    #[test]
    fn split_before_the_start_is_rejected() {
        let mu = delta_zero(10, 1.0, 8);
        let inst = drift_instance(0.0, pathwise_terminal(|_p| 0.0));
        let space = constant_policies(0, &[0.0]);
        let err = dpp_residual(
            0.5,
            0.5,
            &mu,
            &inst,
            &space,
            &space,
            &space,
            &DppOpts::default(),
            key(9),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn noisy_split_with_compatible_spaces_is_a_monte_carlo_zero() {
        // b = a, sigma = 1, g = -X_T^2, split at 0.5: the glued space equals
        // stage-1 constants times stage-2 sign tables, so the exact values
        // coincide and the residual must sit inside three standard errors.
        let mu = delta_zero(50, 1.0, 512);
        let inst = drift_instance(1.0, pathwise_terminal(|p| -p.terminal()[0].powi(2)));
        let actions = [-1.0, 0.0, 1.0];
        let stage1 = constant_policies(0, &actions);
        let mut stage2 = Vec::new();
        for &an in &actions {
            for &ap in &actions {
                stage2.push(sign_policy(25, 25, an, ap).unwrap());
            }
        }
        let mut lhs = Vec::new();
        for s1 in &stage1 {
            for s2 in &stage2 {
                lhs.push(s1.then(s2).unwrap());
            }
        }
        let opts = DppOpts {
            eval: EvalOpts { particles: 512, macro_reps: 8 },
            budget: 64,
            stage1_reps: 8,
        };
        let report =
            dpp_residual(0.0, 0.5, &mu, &inst, &lhs, &stage1, &stage2, &opts, key(10)).unwrap();
        assert!(
            report.residual.abs() <= 3.0 * report.stderr + 0.05,
            "residual {} vs stderr {}",
            report.residual,
            report.stderr
        );
    }
}
