//! One function per driver command. Each takes the fully resolved
//! configuration, runs the experiment through the library crate and returns
//! typed rows plus audit counters; serialisation and exit codes live with the
//! caller. Every stream is derived from the configured seed, so a command's
//! rows are a pure function of its resolved configuration.

use mflab_core::calculus::{ito_residual, lions_derivative, second_pathwise_derivative, ItoOpts};
use mflab_core::coupling::build_coupling;
use mflab_core::dynamics::{ActionSet, DynamicsSpec, StepCtx};
use mflab_core::experiments::{
    broken_dpp_experiment, discontinuity_experiment, honest_dpp_experiment, moment_bound_audit,
    openloop_gap_experiment, state_dependence_check,
};
use mflab_core::functional::MeasureFunctional;
use mflab_core::master::{classical_residual, viscosity_check, JetSampler, JetSpec, ResidualOpts, Side};
use mflab_core::reference::{entry, semilinear_jet_coeffs, semilinear_solution};
use mflab_core::sim::{simulate_mkv, SimOpts};
use mflab_core::transport::{theta_distance, wasserstein2, Solver, W2Opts};
use mflab_core::value::{
    constant_policies, optimize_value, sign_policy, DppOpts, EvalOpts, SearchOpts, ValueEstimate,
};
use mflab_core::policy::PiecewisePolicy;
use mflab_core::{PathMeasure, Purpose, Rng, StreamKey, TimeGrid};

use crate::config::ResolvedConfig;
use crate::CliError;

/// Rows plus counters of one executed command.
pub struct CommandOutput {
    pub columns: &'static [&'static str],
    pub rows: Vec<Vec<String>>,
    pub checks_total: usize,
    pub checks_failed: usize,
    pub clamp_events: u64,
}

impl CommandOutput {
    fn new(columns: &'static [&'static str]) -> Self {
        CommandOutput { columns, rows: Vec::new(), checks_total: 0, checks_failed: 0, clamp_events: 0 }
    }

    /// Append a row whose final cell is a pass/fail check.
    fn push_checked(&mut self, mut cells: Vec<String>, pass: bool) {
        cells.push(pass.to_string());
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
        self.checks_total += 1;
        if !pass {
            self.checks_failed += 1;
        }
    }
}

/// Map a library error to the exit-code classes, prefixed with the step that
/// raised it: configuration-shaped errors are usage (exit 2), numerical and
/// I/O failures are computation faults (exit 1).
fn stage(what: &'static str) -> impl Fn(mflab_core::Error) -> CliError {
    move |e| match e {
        mflab_core::Error::Domain(_) | mflab_core::Error::Shape(_) | mflab_core::Error::Config(_) => {
            CliError::Usage(format!("{what}: {e}"))
        }
        other => CliError::Fault(format!("{what}: {other}")),
    }
}

fn fmt(x: f64) -> String {
    x.to_string()
}

/// Uncontrolled unit-volatility driver used to manufacture fixture clouds.
fn standard_brownian() -> Result<DynamicsSpec, CliError> {
    DynamicsSpec::new(
        1,
        ActionSet::None,
        1.0,
        1.0,
        Box::new(|_ctx: &StepCtx<'_>, _a, out: &mut [f64]| out[0] = 0.0),
        Box::new(|_ctx: &StepCtx<'_>, _a, out: &mut [f64]| out[0] = 1.0),
    )
    .map_err(stage("building the fixture dynamics"))
}

/// Cloud of independent Brownian paths from a Gaussian initial law.
fn brownian_cloud(
    grid: TimeGrid,
    n: usize,
    mean: f64,
    sd: f64,
    key: StreamKey,
) -> Result<PathMeasure, CliError> {
    let mut rng = Rng::from_key(key.purpose(Purpose::Init));
    let init: Vec<f64> = (0..n.max(1)).map(|_| mean + sd * rng.normal()).collect();
    let mu0 = PathMeasure::from_initial_states(grid, 1, &init)
        .map_err(stage("building the initial cloud"))?;
    let dynamics = standard_brownian()?;
    let run = simulate_mkv(0.0, &mu0, &dynamics, None, init.len(), key, &SimOpts::default())
        .map_err(stage("simulating the fixture cloud"))?;
    Ok(run.measure)
}

/// Interior grid indices for `points` evaluation times, deduplicated.
fn interior_indices(m: usize, points: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=points)
        .map(|p| ((p * m) as f64 / (points + 1) as f64).round() as usize)
        .map(|k| k.clamp(1, m.saturating_sub(1).max(1)))
        .collect();
    ks.dedup();
    ks
}

pub fn execute(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    match cfg.command.name {
        "ito-check" => ito_check(cfg),
        "derivative-check" => derivative_check(cfg),
        "wasserstein" => wasserstein(cfg),
        "coupling" => coupling(cfg),
        "residual" => residual(cfg),
        "viscosity-check" => viscosity(cfg),
        "dpp-check" => dpp_check(cfg),
        "value-search" => value_search(cfg),
        "counterexample" => counterexample(cfg),
        "state-dependence" => state_dependence(cfg),
        "moment-bound" => moment_bound(cfg),
        other => unreachable!("schema admitted unknown command '{other}'"),
    }
}

/// Chain-rule residual of a catalog functional along a sinusoidal-drift,
/// constant-volatility cloud. Passes when the residual is small relative to
/// the largest decomposition term or within three standard errors of zero.
fn ito_check(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let (n, m) = (cfg.size("n").max(2), cfg.size("m"));
    let horizon = cfg.number("horizon");
    let vol = cfg.number("vol");
    let f = entry(cfg.text("functional")).map_err(stage("resolving the functional"))?.functional;

    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let mu0 = PathMeasure::from_initial_states(grid, 1, &vec![0.0; n])
        .map_err(stage("building the initial cloud"))?;
    let dynamics = DynamicsSpec::new(
        1,
        ActionSet::None,
        1.0,
        vol.abs(),
        Box::new(|ctx: &StepCtx<'_>, _a, out: &mut [f64]| out[0] = ctx.state()[0].sin()),
        Box::new(move |_ctx: &StepCtx<'_>, _a, out: &mut [f64]| out[0] = vol),
    )
    .map_err(stage("building the dynamics"))?;
    let key = StreamKey::root(cfg.seed).purpose(Purpose::Brownian);
    let run = simulate_mkv(0.0, &mu0, &dynamics, None, n, key, &SimOpts { record_vol: true })
        .map_err(stage("simulating the cloud"))?;

    let rep = ito_residual(&f, &run, horizon, &ItoOpts::default())
        .map_err(stage("differencing the functional"))?;
    let pass = rep.relative_residual.abs() <= 0.02 || rep.residual.abs() <= 3.0 * rep.stderr;

    let mut out = CommandOutput::new(&[
        "n", "m", "dt", "change", "time_term", "first_order", "second_order", "residual",
        "stderr", "relative_residual", "pass",
    ]);
    out.clamp_events = run.clamp_events;
    out.push_checked(
        vec![
            n.to_string(),
            m.to_string(),
            fmt(grid.dt()),
            fmt(rep.change),
            fmt(rep.time_term),
            fmt(rep.first_order_term),
            fmt(rep.second_order_term),
            fmt(rep.residual),
            fmt(rep.stderr),
            fmt(rep.relative_residual),
        ],
        pass,
    );
    Ok(out)
}

/// Closed first- and second-order bundles against bump-difference quotients,
/// one row per independent random cloud.
fn derivative_check(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let f = entry(cfg.text("functional")).map_err(stage("resolving the functional"))?.functional;
    if !f.has_dmu() || !f.has_domega_dmu() {
        return Err(CliError::Usage(format!(
            "functional '{}' carries no closed derivative bundle to compare against",
            f.name()
        )));
    }
    let (n, measures, m) = (cfg.size("n").max(2), cfg.size("measures").max(1), cfg.size("m"));
    let (horizon, t) = (cfg.number("horizon"), cfg.number("t"));
    let (eps, tol) = (cfg.number("eps"), cfg.number("tol"));
    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let root = StreamKey::root(cfg.seed);

    let mut out = CommandOutput::new(&["measure", "n", "max_rel_dmu", "max_rel_gamma", "pass"]);
    for j in 0..measures {
        let key = root.child(j as u64);
        let mut param_rng = Rng::from_key(key.purpose(Purpose::Instance));
        let mean = param_rng.uniform_in(-0.5, 0.5);
        let sd = param_rng.uniform_in(0.6, 1.4);
        let mu = brownian_cloud(grid, n, mean, sd, key)?;

        let mut closed_dmu = vec![0.0; n];
        let mut closed_gamma = vec![0.0; n];
        f.dmu_closed(t, &mu, &mut closed_dmu).map_err(stage("evaluating the closed bundle"))?;
        f.domega_dmu_closed(t, &mu, &mut closed_gamma)
            .map_err(stage("evaluating the closed bundle"))?;

        let scale_dmu = closed_dmu.iter().fold(1e-12f64, |a, v| a.max(v.abs()));
        let scale_gamma = closed_gamma.iter().fold(1e-12f64, |a, v| a.max(v.abs()));
        let (mut worst_dmu, mut worst_gamma) = (0.0f64, 0.0f64);
        for i in 0..n {
            let num = lions_derivative(&f, t, &mu, i, eps)
                .map_err(stage("differencing the first-order bundle"))?;
            worst_dmu = worst_dmu.max((num[0] - closed_dmu[i]).abs());
            let num2 = second_pathwise_derivative(&f, t, &mu, i, eps, eps)
                .map_err(stage("differencing the second-order bundle"))?;
            worst_gamma = worst_gamma.max((num2[0] - closed_gamma[i]).abs());
        }
        let rel_dmu = worst_dmu / scale_dmu;
        let rel_gamma = worst_gamma / scale_gamma;
        out.push_checked(
            vec![j.to_string(), n.to_string(), fmt(rel_dmu), fmt(rel_gamma)],
            rel_dmu <= tol && rel_gamma <= tol,
        );
    }
    Ok(out)
}

/// Transport distance between two fixture clouds plus the time/measure
/// pseudometric at equal times. With `jitter = 0` the clouds coincide and
/// both distances must vanish; the pseudometric must also agree with the
/// plain distance whenever the comparison time is the horizon.
fn wasserstein(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let (n, m) = (cfg.size("n").max(1), cfg.size("m"));
    let horizon = cfg.number("horizon");
    let t = cfg.number("t");
    let jitter = cfg.number("jitter");
    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let root = StreamKey::root(cfg.seed);

    let mu = brownian_cloud(grid, n, 0.0, 0.3, root.child(1))?;
    let mut nu = mu.clone();
    if jitter != 0.0 {
        let mut rng = Rng::from_key(root.child(2).purpose(Purpose::Init));
        for i in 0..nu.len() {
            let shift = jitter * rng.normal();
            for v in nu.particle_mut(i) {
                *v += shift;
            }
        }
    }

    let mut opts = W2Opts::default();
    if cfg.count("entropic") == 1 {
        opts.exact_cutoff = 0;
    }
    let res = wasserstein2(&mu, &nu, &opts).map_err(stage("solving the transport problem"))?;
    let theta = theta_distance(t, &mu, t, &nu, &opts)
        .map_err(stage("evaluating the pseudometric"))?;
    let solver = match res.solver {
        Solver::Exact => "exact".to_string(),
        Solver::Sinkhorn { iterations, reg } => format!("sinkhorn(iters={iterations},reg={reg})"),
    };

    let mut pass = true;
    if jitter == 0.0 {
        pass &= res.distance <= 1e-9 && theta <= 1e-9;
    }
    if (t - horizon).abs() < 1e-12 {
        pass &= (theta - res.distance).abs() <= 1e-6 + 1e-6 * res.distance;
    }
    let mut out = CommandOutput::new(&["n", "solver", "distance", "theta", "pass"]);
    out.push_checked(vec![n.to_string(), solver, fmt(res.distance), fmt(theta)], pass);
    Ok(out)
}

/// Finite-marginal coupling over independent cloud pairs: the carrier path
/// must reconstruct the first cloud's marginals exactly, at a realized cost
/// within `1e-3` of the optimal assignment.
fn coupling(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let instances = cfg.size("instances").max(1);
    let (n, m) = (cfg.size("n").max(2), cfg.size("m"));
    let horizon = cfg.number("horizon");
    let pi_count = cfg.size("pi_count").max(1);
    let (eps, delta) = (cfg.number("eps"), cfg.number("delta"));
    let btilde_steps = cfg.size("btilde_steps");
    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let root = StreamKey::root(cfg.seed);

    let mut ks = interior_indices(m, pi_count);
    ks.sort_unstable();
    ks.dedup();
    let pi_times: Vec<f64> = ks.iter().map(|&k| grid.time(k)).collect();

    let mut out = CommandOutput::new(&[
        "instance", "n", "optimal_cost", "realized_cost", "reconstruction_exact", "pass",
    ]);
    for j in 0..instances {
        let key = root.child(j as u64);
        let mut param_rng = Rng::from_key(key.purpose(Purpose::Instance));
        let sd_mu = param_rng.uniform_in(0.2, 0.8);
        let sd_nu = param_rng.uniform_in(0.2, 0.8);
        let mu = brownian_cloud(grid, n, 0.0, sd_mu, key.child(1))?;
        let nu = brownian_cloud(grid, n, param_rng.uniform_in(-0.3, 0.3), sd_nu, key.child(2))?;

        let sys = build_coupling(&mu, &nu, &pi_times, eps, delta, btilde_steps, key.child(3))
            .map_err(stage("building the coupling"))?;
        let mut exact = true;
        for pair in &sys.pairs {
            let rebuilt = sys
                .reconstruct_xi_pi(&sys.eta_pi(pair), &pair.btilde)
                .map_err(stage("reconstructing a marginal"))?;
            if rebuilt != sys.xi_pi(pair) {
                exact = false;
            }
        }
        let realized = sys.realized_cost();
        let pass = exact && realized <= sys.optimal_cost + 1e-3;
        out.push_checked(
            vec![
                j.to_string(),
                n.to_string(),
                fmt(sys.optimal_cost),
                fmt(realized),
                exact.to_string(),
            ],
            pass,
        );
    }
    Ok(out)
}

/// Classical equation residual of a registry surface at interior times of a
/// fixture cloud, one row per time.
fn residual(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let e = entry(cfg.text("id")).map_err(stage("resolving the registry entry"))?;
    let gen = e.generator.as_ref().ok_or_else(|| {
        CliError::Usage(format!("registry entry '{}' carries no generator to check against", e.id))
    })?;
    let (n, m, points) = (cfg.size("n").max(2), cfg.size("m"), cfg.size("points").max(1));
    let horizon = cfg.number("horizon");
    let tol = cfg.number("tol");
    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let mu = brownian_cloud(grid, n, 0.0, cfg.number("init_sd"), StreamKey::root(cfg.seed))?;

    let mut out = CommandOutput::new(&["t", "value", "residual", "generator_stderr", "pass"]);
    for k in interior_indices(m, points) {
        let t = grid.time(k);
        let rep = classical_residual(&e.functional, gen, t, &mu, &ResidualOpts::default())
            .map_err(stage("evaluating the residual"))?;
        out.push_checked(
            vec![fmt(t), fmt(rep.value), fmt(rep.residual), fmt(rep.generator_stderr)],
            rep.residual.abs() <= tol,
        );
    }
    Ok(out)
}

/// Sub- and super-jet checks of the semilinear surface at interior times:
/// slope-padded paraboloids must stay one-sided over the sampled continuation
/// windows and satisfy the corresponding generator inequality. With
/// `corrupt = 1` the candidate gains `0.1 (T - t)` and the sub side must
/// fail by about that much while the super side keeps holding.
fn viscosity(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let id = cfg.text("id");
    if id != "semilinear-half-square-smooth-cap" {
        return Err(CliError::Usage(format!(
            "viscosity jets are provided for 'semilinear-half-square-smooth-cap' only, got '{id}'"
        )));
    }
    let l0 = cfg.number("l0");
    let e = semilinear_solution("half-square", "smooth-cap", l0)
        .map_err(stage("building the semilinear surface"))?;
    let gen = e.generator.expect("the semilinear entry carries its generator");
    let corrupt = cfg.count("corrupt") == 1;
    let candidate = if corrupt {
        let inner = e.functional;
        MeasureFunctional::new("semilinear-corrupted", move |t, mu: &PathMeasure| {
            inner.eval_raw(t, mu) + 0.1 * (mu.grid().horizon() - t)
        })
    } else {
        e.functional
    };

    let (n, m, points) = (cfg.size("n").max(2), cfg.size("m"), cfg.size("points").max(1));
    let horizon = cfg.number("horizon");
    let (delta, kappa_t) = (cfg.number("delta"), cfg.number("kappa_t"));
    let (measures, times) = (cfg.size("measures").max(1), cfg.size("times").max(1));
    let root = StreamKey::root(cfg.seed);
    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let mu = brownian_cloud(grid, n, 0.0, cfg.number("init_sd"), root.child(1))?;

    let mut out = CommandOutput::new(&[
        "t", "side", "samples", "later_times", "refuted", "extremal_gap", "scalar", "tolerance",
        "satisfied", "pass",
    ]);
    for (row, k) in interior_indices(m, points).into_iter().enumerate() {
        let t = grid.time(k);
        let (value, slope, z, gamma) =
            semilinear_jet_coeffs(t, &mu, l0).map_err(stage("assembling the jet coefficients"))?;
        let y = if corrupt { value + 0.1 * (horizon - t) } else { value };
        let v_base = if corrupt { slope - 0.1 } else { slope };
        for (s_idx, side) in [Side::Sub, Side::Super].into_iter().enumerate() {
            let v = match side {
                Side::Sub => v_base + kappa_t,
                Side::Super => v_base - kappa_t,
            };
            let jet = JetSpec { t, y, v, z: z.clone(), gamma: gamma.clone(), delta, l: l0 };
            let sampler = JetSampler {
                measures,
                times_per_measure: times,
                slack: 1e-9,
                key: root.purpose(Purpose::JetSampler).child((2 * row + s_idx) as u64),
            };
            let rep = viscosity_check(&candidate, &gen, &jet, side, &mu, &sampler)
                .map_err(stage("running the jet check"))?;
            // A window shorter than the step size would sample no time past the
            // base and the membership test would hold vacuously; insist on at
            // least one later grid time before counting the row as a pass.
            let windowed = rep.membership.later_times > 0;
            let pass = windowed
                && match (corrupt, side) {
                    (false, _) => rep.satisfied,
                    (true, Side::Sub) => !rep.satisfied,
                    (true, Side::Super) => rep.satisfied,
                };
            out.clamp_events += rep.membership.clamp_events;
            out.push_checked(
                vec![
                    fmt(t),
                    match side {
                        Side::Sub => "sub".into(),
                        Side::Super => "super".into(),
                    },
                    rep.membership.samples.to_string(),
                    rep.membership.later_times.to_string(),
                    rep.membership.refuted.to_string(),
                    fmt(rep.membership.extremal_gap),
                    fmt(rep.scalar),
                    fmt(rep.tolerance),
                    rep.satisfied.to_string(),
                ],
                pass,
            );
        }
    }
    Ok(out)
}

/// Two-interval programming residual. The honest variant (pathwise state
/// cost) must sit within noise of zero; the broken variant (measure-level
/// cost) must show a strictly negative restriction residual.
fn dpp_check(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let variant = cfg.text("variant").to_string();
    let opts = DppOpts {
        eval: EvalOpts { particles: cfg.size("n"), macro_reps: cfg.size("reps") },
        budget: cfg.size("budget"),
        stage1_reps: cfg.size("stage1_reps"),
    };
    let rep = match variant.as_str() {
        "honest" => honest_dpp_experiment(&opts, cfg.seed).map_err(stage("running the honest check"))?,
        "broken" => broken_dpp_experiment(&opts, cfg.seed).map_err(stage("running the broken check"))?,
        other => {
            return Err(CliError::Usage(format!(
                "dpp-check variant must be 'honest' or 'broken', got '{other}'"
            )));
        }
    };
    let pass = match variant.as_str() {
        "honest" => rep.residual.abs() <= 3.0 * rep.stderr,
        _ => rep.residual <= -3.0 * rep.stderr,
    };
    let mut out = CommandOutput::new(&[
        "variant", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "residual", "stderr", "pass",
    ]);
    out.push_checked(
        vec![
            variant,
            fmt(rep.lhs.mean),
            fmt(rep.lhs.stderr),
            fmt(rep.rhs_value),
            fmt(rep.rhs_stderr),
            fmt(rep.residual),
            fmt(rep.stderr),
        ],
        pass,
    );
    Ok(out)
}

/// Search the canonical explicit space (five constants plus the nine
/// first-coordinate sign tables) on a registry control instance from a
/// two-atom initial law. The row also replays the search on a prefix of the
/// space: selection values must be monotone under the shared per-candidate
/// streams.
fn value_search(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let e = entry(cfg.text("instance")).map_err(stage("resolving the registry entry"))?;
    let inst = e.control.as_ref().ok_or_else(|| {
        CliError::Usage(format!("registry entry '{}' carries no control instance", e.id))
    })?;
    let n = cfg.size("n").max(2) & !1usize;
    let (reps, budget) = (cfg.size("reps"), cfg.size("budget"));
    let (spread, horizon, m) = (cfg.number("spread"), cfg.number("horizon"), cfg.size("m"));
    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let init: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { spread } else { -spread }).collect();
    let mu = PathMeasure::from_initial_states(grid, 1, &init)
        .map_err(stage("building the initial cloud"))?;

    let mut space = constant_policies(0, &[-1.0, -0.5, 0.0, 0.5, 1.0]);
    for a in [-1.0, 0.0, 1.0] {
        for b in [-1.0, 0.0, 1.0] {
            space.push(sign_policy(0, 0, a, b).map_err(stage("building the sign tables"))?);
        }
    }
    let opts = SearchOpts { eval: EvalOpts { particles: n, macro_reps: reps }, budget };
    let key = StreamKey::root(cfg.seed).purpose(Purpose::PolicySearch);
    let (best, est): (usize, ValueEstimate) =
        optimize_value(0.0, &mu, inst, &space, &opts, key).map_err(stage("searching the space"))?;
    let prefix = &space[..3.min(space.len())];
    let (_, prefix_est) =
        optimize_value(0.0, &mu, inst, prefix, &opts, key).map_err(stage("searching the prefix"))?;

    let search_value = est.search_value.unwrap_or(est.mean);
    let prefix_value = prefix_est.search_value.unwrap_or(prefix_est.mean);
    let mut out = CommandOutput::new(&[
        "instance", "candidates", "best_index", "search_value", "mean", "stderr",
        "prefix_search_value", "pass",
    ]);
    out.push_checked(
        vec![
            e.id.clone(),
            space.len().to_string(),
            best.to_string(),
            fmt(search_value),
            fmt(est.mean),
            fmt(est.stderr),
            fmt(prefix_value),
        ],
        prefix_value <= search_value + 1e-12,
    );
    Ok(out)
}

/// The two counterexample experiments, one quantity per row.
fn counterexample(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let mut out = CommandOutput::new(&["quantity", "mean", "stderr", "target", "pass"]);
    let eval = EvalOpts { particles: cfg.size("n"), macro_reps: cfg.size("reps") };
    match cfg.text("which") {
        "neq" => {
            let spread = cfg.number("spread");
            let rep = openloop_gap_experiment(spread, &eval, cfg.seed)
                .map_err(stage("running the formulation-gap experiment"))?;
            let gap_target = spread * spread - spread;
            out.push_checked(
                vec![
                    "noise-only-upper".into(),
                    fmt(rep.noise_only_upper),
                    fmt(0.0),
                    fmt(-spread * spread),
                ],
                rep.noise_only_upper == -spread * spread,
            );
            for (name, est, target) in [
                ("feedback", &rep.feedback, -spread),
                ("searched", &rep.searched, -spread),
            ] {
                out.push_checked(
                    vec![name.into(), fmt(est.mean), fmt(est.stderr), fmt(target)],
                    est.mean >= target - 3.0 * est.stderr,
                );
            }
            out.push_checked(
                vec![
                    "zero-action".into(),
                    fmt(rep.zero_action.mean),
                    fmt(rep.zero_action.stderr),
                    fmt(rep.zero_action_target),
                ],
                (rep.zero_action.mean - rep.zero_action_target).abs()
                    <= (3.0 * rep.zero_action.stderr).max(0.02),
            );
            out.push_checked(
                vec!["gap".into(), fmt(rep.gap_lower), fmt(rep.feedback.stderr), fmt(gap_target)],
                rep.gap_lower >= gap_target - 3.0 * rep.feedback.stderr,
            );
            out.push_checked(
                vec![
                    "short-horizon-rate".into(),
                    fmt(rep.probe_rate),
                    fmt(rep.probe_rate_stderr),
                    fmt(-1.0),
                ],
                (rep.probe_rate + 1.0).abs() <= 0.05 + 3.0 * rep.probe_rate_stderr,
            );
        }
        "discontinuity" => {
            let eps = cfg.number("eps");
            let point_eval = EvalOpts { particles: cfg.size("n_point"), macro_reps: cfg.size("reps") };
            let rep = discontinuity_experiment(eps, &eval, &point_eval, cfg.seed)
                .map_err(stage("running the discontinuity experiment"))?;
            for cell in &rep.split_cells {
                let band = (3.0 * cell.estimate.stderr).max(0.02 * cell.oracle.abs().max(1.0));
                out.push_checked(
                    vec![
                        format!("cell({},{})", cell.a_minus, cell.a_plus),
                        fmt(cell.estimate.mean),
                        fmt(cell.estimate.stderr),
                        fmt(cell.oracle),
                    ],
                    (cell.estimate.mean - cell.oracle).abs() <= band,
                );
            }
            out.push_checked(
                vec![
                    "split-best".into(),
                    fmt(rep.split_best.mean),
                    fmt(rep.split_best.stderr),
                    fmt(rep.split_oracle),
                ],
                (rep.split_best.mean - rep.split_oracle).abs()
                    <= (3.0 * rep.split_best.stderr).max(0.05),
            );
            out.push_checked(
                vec![
                    "point-mass".into(),
                    fmt(rep.point_mass.mean),
                    fmt(rep.point_mass.stderr),
                    fmt(0.0),
                ],
                rep.point_mass.mean.abs() <= (5.0 * rep.point_mass.stderr).max(0.05),
            );
            out.push_checked(
                vec!["gap".into(), fmt(rep.gap), fmt(rep.split_best.stderr), fmt(rep.split_oracle)],
                rep.gap >= 0.8 * rep.split_oracle,
            );
        }
        other => {
            return Err(CliError::Usage(format!(
                "counterexample 'which' must be 'neq' or 'discontinuity', got '{other}'"
            )));
        }
    }
    Ok(out)
}

/// Identical present, different pasts: terminal-cost values must agree across
/// seeds, a running-maximum cost must split the two histories.
fn state_dependence(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let opts = EvalOpts { particles: cfg.size("n"), macro_reps: cfg.size("reps") };
    let rep = state_dependence_check(&opts, cfg.seed)
        .map_err(stage("running the state-dependence check"))?;
    let mut out = CommandOutput::new(&["comparison", "diff", "threshold", "pass"]);
    out.push_checked(
        vec!["terminal-cost".into(), fmt(rep.terminal_diff), fmt(rep.terminal_threshold)],
        rep.terminal_consistent,
    );
    out.push_checked(
        vec!["running-max".into(), fmt(rep.pathdep_diff), fmt(rep.pathdep_threshold)],
        rep.pathdep_detected,
    );
    Ok(out)
}

/// Mean-square growth of a constant-action controlled cloud against the
/// discrete comparison bound.
fn moment_bound(cfg: &ResolvedConfig) -> Result<CommandOutput, CliError> {
    let (n, m) = (cfg.size("n").max(2), cfg.size("m"));
    let horizon = cfg.number("horizon");
    let action = cfg.number("action");
    let sigma = cfg.number("sigma");
    let amax = action.abs().max(1.0);
    let dynamics = DynamicsSpec::new(
        1,
        ActionSet::Interval { lo: -amax, hi: amax },
        amax,
        sigma.abs(),
        Box::new(|_ctx: &StepCtx<'_>, a, out: &mut [f64]| out[0] = a),
        Box::new(move |_ctx: &StepCtx<'_>, _a, out: &mut [f64]| out[0] = sigma),
    )
    .map_err(stage("building the dynamics"))?;
    let policy = PiecewisePolicy::constant(0, action);
    let grid = TimeGrid::new(horizon, m).map_err(stage("building the time grid"))?;
    let key = StreamKey::root(cfg.seed);
    let mut rng = Rng::from_key(key.purpose(Purpose::Init));
    let init: Vec<f64> = (0..n).map(|_| cfg.number("init_sd") * rng.normal()).collect();
    let mu = PathMeasure::from_initial_states(grid, 1, &init)
        .map_err(stage("building the initial cloud"))?;

    let rep = moment_bound_audit(&dynamics, Some(&policy), &mu, cfg.seed)
        .map_err(stage("auditing the moment growth"))?;
    let mut out = CommandOutput::new(&["n", "m", "observed_sup", "bound", "pass"]);
    out.push_checked(
        vec![n.to_string(), m.to_string(), fmt(rep.observed_sup), fmt(rep.bound)],
        rep.within,
    );
    Ok(out)
}
