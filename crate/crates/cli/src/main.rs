//! `mflab`: command-line driver for the measure-space laboratory.
//!
//! One experiment is one TOML file naming a command and its parameters
//! (`mflab run config.toml`); a sweep adds a `[grid]` of parameter lists
//! (`mflab sweep sweep.toml`). Every run writes one CSV of rows plus a
//! `manifest.json` recording the fully resolved configuration, tool version,
//! wall-clock time, audit counters and output digests. Outputs are a pure
//! function of the resolved configuration: rerunning a config yields
//! byte-identical CSV files.
//!
//! Exit codes: `0` — ran and every check passed; `1` — a computation fault,
//! or the run finished with failed checks (both diagnosed on stderr); `2` —
//! usage error (bad flags, malformed config, unknown or ill-typed
//! parameters, impossible requests). The only environment overrides are
//! `MFLAB_OUT_DIR` (output directory) and `MFLAB_THREADS` (worker cap).

mod commands;
mod config;
mod manifest;
mod sweep;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::commands::CommandOutput;
use crate::manifest::{fnv1a64, manifest_json, write_atomic, write_manifest, AuditCounters, OutputRecord};

/// Failure classes mirroring the exit-code contract.
#[derive(Debug)]
pub enum CliError {
    /// The request itself is wrong (exit 2).
    Usage(String),
    /// The request was valid but the computation failed (exit 1).
    Fault(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Fault(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Fault(msg) => write!(f, "computation fault: {msg}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mflab",
    version,
    about = "Numerical laboratory for calculus and control on path-measure space",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment described by a TOML config file.
    Run {
        /// Experiment description (see `mflab describe` for commands).
        config: PathBuf,
    },
    /// Run a Cartesian parameter sweep around one experiment.
    Sweep {
        /// Run description plus a [grid] table of parameter value lists.
        config: PathBuf,
    },
    /// List commands and their parameter schemas.
    Describe {
        /// Restrict the listing to one command.
        #[arg(long)]
        command: Option<String>,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = Cli::parse();
    let threads = match threads_override() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return e.code();
        }
    };
    if let Some(t) = threads {
        if let Err(e) = mflab_core::configure_threads(t) {
            eprintln!("usage error: MFLAB_THREADS: {e}");
            return 2;
        }
    }
    let result = match cli.cmd {
        Cmd::Run { config } => do_run(&config),
        Cmd::Sweep { config } => do_sweep(&config, threads),
        Cmd::Describe { command } => do_describe(command.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn threads_override() -> Result<Option<usize>, CliError> {
    match std::env::var("MFLAB_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("MFLAB_THREADS is not valid unicode: {e}"))),
        Ok(raw) if raw.is_empty() => Ok(None),
        Ok(raw) => raw
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| {
                CliError::Usage(format!("MFLAB_THREADS must be a positive integer, got '{raw}'"))
            }),
    }
}

/// Render rows as CSV: a versioned schema comment, optional extra comment
/// lines, the header, the records, trailing comment lines (sweep slopes).
fn render_csv(
    schema_comment: &str,
    extra_comments: &[String],
    columns: &[String],
    rows: &[Vec<String>],
    footers: &[String],
) -> Result<Vec<u8>, CliError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(columns)
        .and_then(|()| rows.iter().try_for_each(|row| writer.write_record(row)))
        .map_err(|e| CliError::Fault(format!("CSV encoding failed: {e}")))?;
    let body = writer
        .into_inner()
        .map_err(|e| CliError::Fault(format!("CSV encoding failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(schema_comment.as_bytes());
    out.push(b'\n');
    for line in extra_comments {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(&body);
    for line in footers {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn write_output_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<OutputRecord, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Fault(format!("creating '{}' failed: {e}", dir.display())))?;
    let path = dir.join(name);
    write_atomic(&path, bytes)
        .map_err(|e| CliError::Fault(format!("writing '{}' failed: {e}", path.display())))?;
    Ok(OutputRecord {
        file: name.to_string(),
        bytes: bytes.len(),
        fnv1a64: format!("{:016x}", fnv1a64(bytes)),
    })
}

/// Exit code for a completed run: failed checks surface as a fault.
fn finish(output_checks: (usize, usize), out_dir: &Path, csv_name: &str) -> i32 {
    let (total, failed) = output_checks;
    println!("checks: {}/{} passed", total - failed, total);
    if failed > 0 {
        eprintln!(
            "computation fault: {failed} of {total} checks failed; see {}",
            out_dir.join(csv_name).display()
        );
        1
    } else {
        0
    }
}

fn do_run(path: &Path) -> Result<i32, CliError> {
    let cfg = config::load_run(path)?;
    let start = Instant::now();
    let output: CommandOutput = commands::execute(&cfg)?;

    let csv_name = format!("{}.csv", cfg.command.name);
    let columns: Vec<String> = output.columns.iter().map(|c| c.to_string()).collect();
    let bytes = render_csv(
        &format!("# mflab {}-csv v1", cfg.command.name),
        &[],
        &columns,
        &output.rows,
        &[],
    )?;
    let record = write_output_file(&cfg.out_dir, &csv_name, &bytes)?;

    let audit = AuditCounters {
        rows: output.rows.len(),
        checks_total: output.checks_total,
        checks_failed: output.checks_failed,
        clamp_events: output.clamp_events,
    };
    let doc = manifest_json(&cfg, None, start.elapsed().as_secs_f64(), &audit, &[record]);
    write_manifest(&cfg.out_dir, &doc)?;
    println!(
        "wrote {} ({} rows) and manifest.json in {}",
        csv_name,
        output.rows.len(),
        cfg.out_dir.display()
    );
    Ok(finish((output.checks_total, output.checks_failed), &cfg.out_dir, &csv_name))
}

fn do_sweep(path: &Path, threads: Option<usize>) -> Result<i32, CliError> {
    let sweep_cfg = config::load_sweep(path)?;
    let start = Instant::now();
    let outcome = sweep::run_sweep(&sweep_cfg, threads)?;

    let csv_name = format!("sweep-{}.csv", sweep_cfg.base.command.name);
    let footers: Vec<String> = outcome
        .slopes
        .iter()
        .map(|(col, against, slope)| format!("# slope,{col},{against},{slope}"))
        .collect();
    let bytes = render_csv(
        "# mflab sweep-csv v1",
        &[format!("# command {}", sweep_cfg.base.command.name)],
        &outcome.columns,
        &outcome.rows,
        &footers,
    )?;
    let record = write_output_file(&sweep_cfg.base.out_dir, &csv_name, &bytes)?;

    let audit = AuditCounters {
        rows: outcome.rows.len(),
        checks_total: outcome.checks_total,
        checks_failed: outcome.checks_failed,
        clamp_events: outcome.clamp_events,
    };
    let doc = manifest_json(
        &sweep_cfg.base,
        Some((&sweep_cfg.grid, sweep_cfg.cap, sweep_cfg.parallel, outcome.points)),
        start.elapsed().as_secs_f64(),
        &audit,
        &[record],
    );
    write_manifest(&sweep_cfg.base.out_dir, &doc)?;
    println!(
        "wrote {} ({} grid points, {} rows) and manifest.json in {}",
        csv_name,
        outcome.points,
        outcome.rows.len(),
        sweep_cfg.base.out_dir.display()
    );
    Ok(finish(
        (outcome.checks_total, outcome.checks_failed),
        &sweep_cfg.base.out_dir,
        &csv_name,
    ))
}

fn do_describe(filter: Option<&str>) -> Result<i32, CliError> {
    let schemas: Vec<&config::CommandSchema> = match filter {
        Some(name) => vec![config::schema(name)?],
        None => config::SCHEMAS.iter().collect(),
    };
    for schema in schemas {
        println!("{} — {}", schema.name, schema.about);
        for p in schema.params {
            let default = match p.default {
                Some(config::DefaultValue::Count(v)) => format!("default {v}"),
                Some(config::DefaultValue::Number(v)) => format!("default {v}"),
                Some(config::DefaultValue::Text(v)) => format!("default \"{v}\""),
                None => "required".to_string(),
            };
            println!("  {:<14} {:<7} {:<16} {}", p.name, p.kind.label(), default, p.help);
        }
        println!();
    }
    Ok(0)
}
