//! Cartesian parameter sweeps around one command. Grid points share the base
//! seed (common random numbers across the axis), run sequentially by default
//! or on a small worker pool, and are always merged in grid order: axes
//! sorted by name, the last axis varying fastest. Single-axis sweeps get
//! log-log convergence slopes appended for the command's designated columns.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mflab_core::stats::ols_slope;

use crate::commands::{execute, CommandOutput};
use crate::config::{ResolvedConfig, SweepConfig, Value};
use crate::CliError;

/// Merged result of a sweep.
pub struct SweepOutcome {
    /// Swept parameter names (alphabetical), then the command's columns.
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub checks_total: usize,
    pub checks_failed: usize,
    pub clamp_events: u64,
    /// `(column, against, slope)` fitted on single-axis sweeps.
    pub slopes: Vec<(String, String, f64)>,
    pub points: usize,
}

/// Parameter assignment of grid point `idx` (row-major, last key fastest).
fn assignment(sweep: &SweepConfig, idx: usize) -> Vec<(&str, &Value)> {
    let mut rem = idx;
    let mut picks: Vec<(&str, &Value)> = Vec::with_capacity(sweep.grid.len());
    for (key, values) in sweep.grid.iter().rev() {
        picks.push((key.as_str(), &values[rem % values.len()]));
        rem /= values.len();
    }
    picks.reverse();
    picks
}

fn point_config(sweep: &SweepConfig, idx: usize) -> ResolvedConfig {
    let mut cfg = sweep.base.clone();
    for (key, value) in assignment(sweep, idx) {
        cfg.params.insert(key.to_string(), value.clone());
    }
    cfg
}

fn numeric(v: &Value) -> Option<f64> {
    match v {
        Value::Count(c) => Some(*c as f64),
        Value::Number(x) => Some(*x),
        Value::Text(_) => None,
    }
}

/// Log-log slopes of the command's designated columns against a single swept
/// axis. Requires at least two distinct positive axis values and strictly
/// positive per-point column magnitudes; anything else silently skips the
/// column rather than reporting a meaningless fit.
fn fit_slopes(
    sweep: &SweepConfig,
    outputs: &[CommandOutput],
) -> Vec<(String, String, f64)> {
    let mut slopes = Vec::new();
    if sweep.grid.len() != 1 {
        return slopes;
    }
    let (key, values) = sweep.grid.iter().next().expect("single-axis sweep");
    let xs: Option<Vec<f64>> = values.iter().map(numeric).collect();
    let Some(xs) = xs else { return slopes };
    if xs.iter().any(|&x| !(x > 0.0)) || xs.windows(2).all(|w| w[0] == w[1]) || xs.len() < 2 {
        return slopes;
    }
    let columns = outputs[0].columns;
    for col in sweep.base.command.slope_columns {
        let Some(c) = columns.iter().position(|name| name == col) else { continue };
        let mut ys = Vec::with_capacity(outputs.len());
        for out in outputs {
            let mut acc = 0.0;
            let mut count = 0usize;
            for row in &out.rows {
                if let Ok(v) = row[c].parse::<f64>() {
                    if v.is_finite() {
                        acc += v.abs();
                        count += 1;
                    }
                }
            }
            if count == 0 {
                break;
            }
            ys.push(acc / count as f64);
        }
        if ys.len() != outputs.len() || ys.iter().any(|&y| !(y > 0.0)) {
            continue;
        }
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let slope = ols_slope(&lx, &ly);
        slopes.push((col.to_string(), key.clone(), slope));
        // Step-count studies read more naturally against the step size.
        if key == "m" {
            slopes.push((col.to_string(), "dt".to_string(), -slope));
        }
    }
    slopes
}

/// Run every grid point and merge. `threads` caps the worker pool of a
/// parallel sweep; sequential sweeps ignore it.
pub fn run_sweep(sweep: &SweepConfig, threads: Option<usize>) -> Result<SweepOutcome, CliError> {
    let points: usize = sweep.grid.values().map(Vec::len).product();
    let configs: Vec<ResolvedConfig> = (0..points).map(|i| point_config(sweep, i)).collect();

    let outputs: Vec<CommandOutput> = if sweep.parallel && points > 1 {
        let workers = threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get()))
            .clamp(1, points);
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<CommandOutput, CliError>>>> =
            (0..points).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= points {
                        break;
                    }
                    let result = execute(&configs[i]);
                    *slots[i].lock().expect("sweep slot poisoned") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("sweep slot poisoned").expect("every point ran"))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        configs.iter().map(execute).collect::<Result<Vec<_>, _>>()?
    };

    let slopes = fit_slopes(sweep, &outputs);
    let mut columns: Vec<String> = sweep.grid.keys().cloned().collect();
    columns.extend(outputs[0].columns.iter().map(|c| c.to_string()));

    let mut merged = SweepOutcome {
        columns,
        rows: Vec::new(),
        checks_total: 0,
        checks_failed: 0,
        clamp_events: 0,
        slopes,
        points,
    };
    for (i, out) in outputs.into_iter().enumerate() {
        let prefix: Vec<String> =
            assignment(sweep, i).into_iter().map(|(_, v)| v.render()).collect();
        for row in out.rows {
            let mut cells = prefix.clone();
            cells.extend(row);
            merged.rows.push(cells);
        }
        merged.checks_total += out.checks_total;
        merged.checks_failed += out.checks_failed;
        merged.clamp_events += out.clamp_events;
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny_sweep() -> SweepConfig {
        let base = crate::config::ResolvedConfig {
            command: crate::config::schema("wasserstein").unwrap(),
            seed: 3,
            out_dir: ".".into(),
            params: crate::config::schema("wasserstein")
                .unwrap()
                .params
                .iter()
                .map(|p| (p.name.to_string(), p.default.unwrap().to_value()))
                .collect::<BTreeMap<_, _>>(),
        };
        let mut grid = BTreeMap::new();
        grid.insert("n".to_string(), vec![Value::Count(4), Value::Count(8)]);
        grid.insert("jitter".to_string(), vec![Value::Number(0.0)]);
        SweepConfig { base, grid, cap: 64, parallel: false }
    }

    #[test]
    fn grid_order_is_alphabetical_with_last_axis_fastest() {
        let sweep = tiny_sweep();
        // Keys sort as [jitter, n]; n varies fastest.
        let a0 = assignment(&sweep, 0);
        let a1 = assignment(&sweep, 1);
        assert_eq!(a0[0].0, "jitter");
        assert_eq!(a0[1], ("n", &Value::Count(4)));
        assert_eq!(a1[1], ("n", &Value::Count(8)));
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree() {
        let mut sweep = tiny_sweep();
        let seq = run_sweep(&sweep, None).unwrap();
        sweep.parallel = true;
        let par = run_sweep(&sweep, Some(2)).unwrap();
        assert_eq!(seq.rows, par.rows);
        assert_eq!(seq.columns, par.columns);
        assert_eq!(seq.points, 2);
    }
}
