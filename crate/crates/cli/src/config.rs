//! Experiment descriptions: a single TOML file names one command and its
//! parameters. Every command declares a schema (parameter names, kinds and
//! defaults); files are validated against the schema in full — unknown keys,
//! wrong kinds and missing required values are usage errors — before any
//! computation starts, and the fully resolved parameter set (defaults echoed)
//! is what the manifest records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Parameter kinds a schema can declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Nonnegative integer (particle counts, step counts, budgets).
    Count,
    /// Finite float; integers are accepted and widened.
    Number,
    /// String (registry ids, variant selectors).
    Text,
}

impl Kind {
    pub fn label(self) -> &'static str {
        match self {
            Kind::Count => "count",
            Kind::Number => "number",
            Kind::Text => "text",
        }
    }
}

/// A resolved parameter value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Count(u64),
    Number(f64),
    Text(String),
}

impl Value {
    /// Rendering used in CSV cells and file names; round-trips numbers.
    pub fn render(&self) -> String {
        match self {
            Value::Count(v) => v.to_string(),
            Value::Number(v) => v.to_string(),
            Value::Text(v) => v.clone(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Count(v) => serde_json::Value::from(*v),
            Value::Number(v) => serde_json::Value::from(*v),
            Value::Text(v) => serde_json::Value::from(v.as_str()),
        }
    }
}

/// Schema default; `Text` borrows so schemas can live in statics.
#[derive(Debug, Clone, Copy)]
pub enum DefaultValue {
    Count(u64),
    Number(f64),
    Text(&'static str),
}

impl DefaultValue {
    pub(crate) fn to_value(self) -> Value {
        match self {
            DefaultValue::Count(v) => Value::Count(v),
            DefaultValue::Number(v) => Value::Number(v),
            DefaultValue::Text(v) => Value::Text(v.to_string()),
        }
    }
}

/// One declared parameter.
#[derive(Debug)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: Kind,
    /// `None` marks the parameter required.
    pub default: Option<DefaultValue>,
    pub help: &'static str,
}

/// One command of the driver.
#[derive(Debug)]
pub struct CommandSchema {
    pub name: &'static str,
    pub about: &'static str,
    pub params: &'static [ParamSpec],
    /// Output columns whose log-log slope against a swept parameter is
    /// appended to sweep output (convergence studies).
    pub slope_columns: &'static [&'static str],
}

const fn count(name: &'static str, default: u64, help: &'static str) -> ParamSpec {
    ParamSpec { name, kind: Kind::Count, default: Some(DefaultValue::Count(default)), help }
}

const fn number(name: &'static str, default: f64, help: &'static str) -> ParamSpec {
    ParamSpec { name, kind: Kind::Number, default: Some(DefaultValue::Number(default)), help }
}

const fn text(name: &'static str, default: &'static str, help: &'static str) -> ParamSpec {
    ParamSpec { name, kind: Kind::Text, default: Some(DefaultValue::Text(default)), help }
}

const fn required_text(name: &'static str, help: &'static str) -> ParamSpec {
    ParamSpec { name, kind: Kind::Text, default: None, help }
}

/// Every command the driver knows, with its full parameter schema.
pub static SCHEMAS: &[CommandSchema] = &[
    CommandSchema {
        name: "ito-check",
        about: "pathwise chain-rule residual of a catalog functional along one simulated cloud",
        params: &[
            text("functional", "quadratic-covariance", "catalog id of the functional to difference"),
            count("n", 20000, "particles"),
            count("m", 200, "time steps"),
            number("horizon", 1.0, "terminal time"),
            number("vol", 1.0, "constant volatility of the driving dynamics"),
        ],
        slope_columns: &["residual"],
    },
    CommandSchema {
        name: "derivative-check",
        about: "closed measure-derivative bundles against bump-difference quotients",
        params: &[
            text("functional", "quadratic-covariance", "catalog id carrying closed first and second bundles"),
            count("n", 100, "particles per cloud"),
            count("measures", 10, "independent random clouds"),
            count("m", 20, "time steps"),
            number("horizon", 1.0, "terminal time"),
            number("t", 0.5, "evaluation time"),
            number("eps", 1e-4, "bump size of the difference quotients"),
            number("tol", 1e-3, "relative error each cloud must stay under"),
        ],
        slope_columns: &["max_rel_dmu", "max_rel_gamma"],
    },
    CommandSchema {
        name: "wasserstein",
        about: "transport distance between two simulated clouds, with the stopped-path pseudometric",
        params: &[
            count("n", 64, "particles per cloud"),
            count("m", 8, "time steps"),
            number("horizon", 1.0, "terminal time"),
            number("t", 1.0, "stopping time of the pseudometric comparison"),
            number("jitter", 0.0, "per-path shift scale of the second cloud; 0 clones the first"),
            count("entropic", 0, "1 forces the regularised solver regardless of size"),
        ],
        slope_columns: &["distance"],
    },
    CommandSchema {
        name: "coupling",
        about: "finite-marginal coupling construction: exact reconstruction and near-optimal cost",
        params: &[
            count("instances", 50, "independent cloud pairs"),
            count("n", 16, "particles per cloud"),
            count("m", 8, "time steps"),
            number("horizon", 1.0, "terminal time"),
            count("pi_count", 2, "marginal times of the coupling"),
            number("eps", 0.25, "matching tolerance of the construction"),
            number("delta", 0.25, "cell side of the discretisation"),
            count("btilde_steps", 64, "steps of the auxiliary carrier path"),
        ],
        slope_columns: &["optimal_cost"],
    },
    CommandSchema {
        name: "residual",
        about: "classical equation residual of a catalog surface at interior times of one cloud",
        params: &[
            text("id", "heat-square-zero", "registry id; the entry must carry a generator"),
            count("n", 64, "particles"),
            count("m", 20, "time steps"),
            number("horizon", 1.0, "terminal time"),
            count("points", 10, "interior evaluation times"),
            number("tol", 5e-3, "absolute residual bound per point"),
            number("init_sd", 0.5, "initial spread of the cloud"),
        ],
        slope_columns: &["residual"],
    },
    CommandSchema {
        name: "viscosity-check",
        about: "one-sided jet membership and viscosity inequalities of the semilinear surface",
        params: &[
            text("id", "semilinear-half-square-smooth-cap", "registry id (jets are provided for the semilinear surface)"),
            count("n", 512, "particles; the slope padding must dominate the cloud's sampling noise"),
            count("m", 1000, "time steps; the window must cover at least one step"),
            number("horizon", 1.0, "terminal time"),
            count("points", 5, "interior base times"),
            count("measures", 25, "sampled continuation measures per jet"),
            count("times", 8, "window times examined per continuation"),
            number("delta", 0.001, "jet window length (>= the step size, or the run is vacuous)"),
            number("kappa_t", 0.015, "one-sided slope padding of the jets"),
            number("l0", 1.0, "half-square cap of the nonlinearity (>= 1)"),
            count("corrupt", 0, "1 adds 0.1*(T-t) to the candidate; the sub side must then fail"),
            number("init_sd", 0.4, "initial spread of the cloud"),
        ],
        slope_columns: &[],
    },
    CommandSchema {
        name: "dpp-check",
        about: "two-interval programming residual over explicit finite policy spaces",
        params: &[
            text("variant", "honest", "'honest' (state cost, residual ~ 0) or 'broken' (measure cost, restriction strictly loses)"),
            count("n", 2048, "particles"),
            count("reps", 8, "macro-replications per estimate (>= 8)"),
            count("stage1_reps", 8, "macro-replications of the outer gluing"),
            count("budget", 64, "candidate evaluations allowed per search"),
        ],
        slope_columns: &["stderr"],
    },
    CommandSchema {
        name: "value-search",
        about: "closed-loop value search over constants and first-coordinate sign tables",
        params: &[
            text("instance", "open-loop-gap", "registry id carrying a control instance"),
            count("n", 2048, "particles"),
            count("reps", 8, "macro-replications per estimate (>= 8)"),
            count("budget", 64, "candidate evaluations allowed"),
            number("spread", 1.5, "initial two-atom spread of the cloud"),
            number("horizon", 2.0, "terminal time"),
            count("m", 40, "time steps"),
        ],
        slope_columns: &["stderr"],
    },
    CommandSchema {
        name: "counterexample",
        about: "the two failure experiments: formulation gap ('neq') and value discontinuity ('discontinuity')",
        params: &[
            required_text("which", "'neq' or 'discontinuity'"),
            number("spread", 2.0, "neq: initial spread and horizon"),
            number("eps", 0.1, "discontinuity: half-distance of the split initial law"),
            count("n", 8192, "particles of the main estimates"),
            count("reps", 32, "macro-replications per estimate; the eighth-moment payoffs need a stable error bar"),
            count("n_point", 65536, "discontinuity: particles of the point-mass re-evaluation"),
        ],
        slope_columns: &["stderr"],
    },
    CommandSchema {
        name: "state-dependence",
        about: "value depends on the present law only for state costs; running-max control must differ",
        params: &[
            count("n", 2048, "particles"),
            count("reps", 8, "macro-replications per estimate (>= 8)"),
        ],
        slope_columns: &[],
    },
    CommandSchema {
        name: "moment-bound",
        about: "mean-square growth of a controlled cloud against the discrete comparison bound",
        params: &[
            count("n", 4096, "particles"),
            count("m", 50, "time steps"),
            number("horizon", 1.0, "terminal time"),
            number("action", 1.0, "constant action applied throughout"),
            number("sigma", 1.0, "constant volatility"),
            number("init_sd", 0.5, "initial spread of the cloud"),
        ],
        slope_columns: &["bound"],
    },
];

pub fn schema(name: &str) -> Result<&'static CommandSchema, CliError> {
    SCHEMAS.iter().find(|s| s.name == name).ok_or_else(|| {
        let known: Vec<&str> = SCHEMAS.iter().map(|s| s.name).collect();
        CliError::Usage(format!("unknown command '{name}'; available: {}", known.join(", ")))
    })
}

/// A fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub command: &'static CommandSchema,
    pub seed: u64,
    /// Output directory after the environment override.
    pub out_dir: PathBuf,
    /// Every schema parameter, defaults included.
    pub params: BTreeMap<String, Value>,
}

impl ResolvedConfig {
    pub fn count(&self, name: &str) -> u64 {
        match &self.params[name] {
            Value::Count(v) => *v,
            other => panic!("parameter '{name}' resolved to {other:?}, expected a count"),
        }
    }

    pub fn size(&self, name: &str) -> usize {
        self.count(name) as usize
    }

    pub fn number(&self, name: &str) -> f64 {
        match &self.params[name] {
            Value::Number(v) => *v,
            Value::Count(v) => *v as f64,
            other => panic!("parameter '{name}' resolved to {other:?}, expected a number"),
        }
    }

    pub fn text(&self, name: &str) -> &str {
        match &self.params[name] {
            Value::Text(v) => v,
            other => panic!("parameter '{name}' resolved to {other:?}, expected text"),
        }
    }
}

/// A parsed sweep description: the base config plus the grid axes.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub base: ResolvedConfig,
    /// Axis values per swept parameter, in declaration-independent
    /// (alphabetical) key order.
    pub grid: BTreeMap<String, Vec<Value>>,
    /// Hard cap on the number of grid points.
    pub cap: u64,
    pub parallel: bool,
}

fn coerce(name: &str, kind: Kind, raw: &toml::Value) -> Result<Value, CliError> {
    match (kind, raw) {
        (Kind::Count, toml::Value::Integer(v)) if *v >= 0 => Ok(Value::Count(*v as u64)),
        (Kind::Number, toml::Value::Integer(v)) => Ok(Value::Number(*v as f64)),
        (Kind::Number, toml::Value::Float(v)) if v.is_finite() => Ok(Value::Number(*v)),
        (Kind::Text, toml::Value::String(v)) => Ok(Value::Text(v.clone())),
        _ => Err(CliError::Usage(format!(
            "parameter '{name}' must be a {}, got {raw}",
            kind.label()
        ))),
    }
}

fn root_integer(table: &toml::Table, key: &str) -> Result<Option<u64>, CliError> {
    match table.get(key) {
        None => Ok(None),
        Some(toml::Value::Integer(v)) if *v >= 0 => Ok(Some(*v as u64)),
        Some(other) => Err(CliError::Usage(format!("'{key}' must be a nonnegative integer, got {other}"))),
    }
}

fn root_string(table: &toml::Table, key: &str) -> Result<Option<String>, CliError> {
    match table.get(key) {
        None => Ok(None),
        Some(toml::Value::String(v)) => Ok(Some(v.clone())),
        Some(other) => Err(CliError::Usage(format!("'{key}' must be a string, got {other}"))),
    }
}

fn resolve_params(
    schema: &'static CommandSchema,
    given: Option<&toml::Value>,
) -> Result<BTreeMap<String, Value>, CliError> {
    let empty = toml::Table::new();
    let table = match given {
        None => &empty,
        Some(toml::Value::Table(t)) => t,
        Some(other) => {
            return Err(CliError::Usage(format!("[params] must be a table, got {other}")));
        }
    };
    for key in table.keys() {
        if !schema.params.iter().any(|p| p.name == key) {
            let known: Vec<&str> = schema.params.iter().map(|p| p.name).collect();
            return Err(CliError::Usage(format!(
                "command '{}' has no parameter '{key}'; available: {}",
                schema.name,
                known.join(", ")
            )));
        }
    }
    let mut out = BTreeMap::new();
    for p in schema.params {
        let value = match (table.get(p.name), p.default) {
            (Some(raw), _) => coerce(p.name, p.kind, raw)?,
            (None, Some(d)) => d.to_value(),
            (None, None) => {
                return Err(CliError::Usage(format!(
                    "command '{}' requires parameter '{}' ({})",
                    schema.name, p.name, p.help
                )));
            }
        };
        out.insert(p.name.to_string(), value);
    }
    Ok(out)
}

fn parse_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config '{}': {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("config '{}' is not valid TOML: {e}", path.display())))
}

fn check_root_keys(table: &toml::Table, allowed: &[&str]) -> Result<(), CliError> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown top-level key '{key}'; allowed: {}",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

fn resolve_base(table: &toml::Table) -> Result<ResolvedConfig, CliError> {
    let name = root_string(table, "command")?
        .ok_or_else(|| CliError::Usage("config needs a 'command' key".into()))?;
    let schema = schema(&name)?;
    let seed = root_integer(table, "seed")?.unwrap_or(1);
    let configured_dir = root_string(table, "out_dir")?.unwrap_or_else(|| ".".into());
    let out_dir = match std::env::var_os("MFLAB_OUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(configured_dir),
    };
    let params = resolve_params(schema, table.get("params"))?;
    Ok(ResolvedConfig { command: schema, seed, out_dir, params })
}

/// Parse and fully validate a single-run description.
pub fn load_run(path: &Path) -> Result<ResolvedConfig, CliError> {
    let table = parse_table(path)?;
    check_root_keys(&table, &["command", "seed", "out_dir", "params"])?;
    resolve_base(&table)
}

/// Parse and fully validate a sweep description: a run config plus a
/// non-empty `[grid]` of parameter value lists and an optional `[sweep]`
/// table with `cap` and `parallel`.
pub fn load_sweep(path: &Path) -> Result<SweepConfig, CliError> {
    let table = parse_table(path)?;
    check_root_keys(&table, &["command", "seed", "out_dir", "params", "grid", "sweep"])?;
    let base = resolve_base(&table)?;

    let grid_table = match table.get("grid") {
        Some(toml::Value::Table(t)) if !t.is_empty() => t,
        Some(toml::Value::Table(_)) | None => {
            return Err(CliError::Usage("sweep config needs a non-empty [grid] table".into()));
        }
        Some(other) => return Err(CliError::Usage(format!("[grid] must be a table, got {other}"))),
    };
    let mut grid = BTreeMap::new();
    for (key, raw) in grid_table {
        let spec = base
            .command
            .params
            .iter()
            .find(|p| p.name == key)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "grid key '{key}' is not a parameter of command '{}'",
                    base.command.name
                ))
            })?;
        let items = match raw {
            toml::Value::Array(items) if !items.is_empty() => items,
            _ => {
                return Err(CliError::Usage(format!(
                    "grid key '{key}' must be a non-empty array of {} values",
                    spec.kind.label()
                )));
            }
        };
        let values = items
            .iter()
            .map(|item| coerce(key, spec.kind, item))
            .collect::<Result<Vec<_>, _>>()?;
        grid.insert(key.clone(), values);
    }

    let (mut cap, mut parallel) = (64u64, false);
    match table.get("sweep") {
        None => {}
        Some(toml::Value::Table(t)) => {
            for key in t.keys() {
                if key != "cap" && key != "parallel" {
                    return Err(CliError::Usage(format!(
                        "unknown [sweep] key '{key}'; allowed: cap, parallel"
                    )));
                }
            }
            if let Some(v) = root_integer(t, "cap")? {
                cap = v;
            }
            match t.get("parallel") {
                None => {}
                Some(toml::Value::Boolean(b)) => parallel = *b,
                Some(other) => {
                    return Err(CliError::Usage(format!("'parallel' must be a boolean, got {other}")));
                }
            }
        }
        Some(other) => return Err(CliError::Usage(format!("[sweep] must be a table, got {other}"))),
    }

    let points: u64 = grid.values().map(|v| v.len() as u64).product();
    if points == 0 || points > cap {
        return Err(CliError::Usage(format!(
            "sweep would run {points} grid points, over the safety cap {cap}; raise [sweep].cap deliberately"
        )));
    }
    Ok(SweepConfig { base, grid, cap, parallel })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_are_echoed_and_overrides_stick() {
        let f = write_tmp("command = \"wasserstein\"\n[params]\nn = 32\n");
        let cfg = load_run(f.path()).unwrap();
        assert_eq!(cfg.count("n"), 32);
        assert_eq!(cfg.count("m"), 8);
        assert_eq!(cfg.number("jitter"), 0.0);
        assert_eq!(cfg.seed, 1);
        // Every declared parameter is present after resolution.
        assert_eq!(cfg.params.len(), cfg.command.params.len());
    }

    #[test]
    fn unknown_keys_and_bad_kinds_are_usage_errors() {
        for bad in [
            "command = \"wasserstein\"\n[params]\nbogus = 1\n",
            "command = \"wasserstein\"\n[params]\nn = \"many\"\n",
            "command = \"wasserstein\"\nextra = 3\n",
            "command = \"no-such-command\"\n",
            "command = \"counterexample\"\n",
            "seed = 1\n",
        ] {
            let f = write_tmp(bad);
            match load_run(f.path()) {
                Err(CliError::Usage(_)) => {}
                other => panic!("expected a usage error for {bad:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn number_parameters_accept_integers() {
        let f = write_tmp("command = \"wasserstein\"\n[params]\njitter = 1\n");
        let cfg = load_run(f.path()).unwrap();
        assert_eq!(cfg.number("jitter"), 1.0);
    }

    #[test]
    fn sweep_grid_is_validated_and_capped() {
        let f = write_tmp(
            "command = \"wasserstein\"\n[grid]\nn = [8, 16, 32]\n[sweep]\ncap = 2\n",
        );
        match load_sweep(f.path()) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("safety cap")),
            other => panic!("expected the cap to trip, got {other:?}"),
        }

        let f = write_tmp("command = \"wasserstein\"\n[grid]\nbogus = [1]\n");
        assert!(matches!(load_sweep(f.path()), Err(CliError::Usage(_))));

        let f = write_tmp("command = \"wasserstein\"\n[grid]\nn = [8, 16]\njitter = [0.0, 0.5]\n");
        let sweep = load_sweep(f.path()).unwrap();
        assert_eq!(sweep.grid.len(), 2);
        assert_eq!(sweep.cap, 64);
        assert!(!sweep.parallel);
    }
}
