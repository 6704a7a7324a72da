//! Run manifests: one JSON document per run recording the fully resolved
//! configuration, tool version, wall-clock time, audit counters and a digest
//! of every output file. Manifests are written atomically (temporary file +
//! rename) and last, so a manifest on disk always describes complete outputs.
//! Outputs are deterministic in the resolved configuration: two manifests
//! that agree outside `wall_clock_seconds` describe byte-identical files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value as Json};

use crate::config::{ResolvedConfig, Value};
use crate::CliError;

/// 64-bit FNV-1a of a byte stream; cheap, stable and dependency-free.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Write `contents` to `path` atomically: a unique sibling temporary file is
/// written, flushed and renamed over the target.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(contents)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    std::fs::rename(&tmp.0, path)
}

/// Minimal unique-temporary helper (name salted by pid and a counter) so the
/// binary does not need a crate for one call site.
fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, std::fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    loop {
        let name = format!(
            ".mflab-tmp-{}-{}",
            std::process::id(),
            COUNTER.fetch_add(1, Ordering::Relaxed)
        );
        let path = dir.join(name);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => return Ok((path, file)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}

/// One output file: path relative to the output directory, size, digest.
pub struct OutputRecord {
    pub file: String,
    pub bytes: usize,
    pub fnv1a64: String,
}

/// Counters every run reports alongside its rows.
#[derive(Default)]
pub struct AuditCounters {
    pub rows: usize,
    pub checks_total: usize,
    pub checks_failed: usize,
    pub clamp_events: u64,
}

fn params_json(params: &BTreeMap<String, Value>) -> Json {
    let map: serde_json::Map<String, Json> =
        params.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
    Json::Object(map)
}

/// Assemble the manifest document for a single run (`grid` is `None`) or a
/// sweep (`grid` carries the axes plus cap and mode).
pub fn manifest_json(
    cfg: &ResolvedConfig,
    grid: Option<(&BTreeMap<String, Vec<Value>>, u64, bool, usize)>,
    wall_clock_seconds: f64,
    audit: &AuditCounters,
    outputs: &[OutputRecord],
) -> Json {
    let mut doc = json!({
        "schema": "mflab-manifest-v1",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": cfg.command.name,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir.display().to_string(),
        "params": params_json(&cfg.params),
        "wall_clock_seconds": wall_clock_seconds,
        "audit": {
            "rows": audit.rows,
            "checks_total": audit.checks_total,
            "checks_failed": audit.checks_failed,
            "clamp_events": audit.clamp_events,
        },
        "outputs": outputs
            .iter()
            .map(|o| json!({ "file": o.file, "bytes": o.bytes, "fnv1a64": o.fnv1a64 }))
            .collect::<Vec<_>>(),
    });
    if let Some((axes, cap, parallel, points)) = grid {
        let axes_json: serde_json::Map<String, Json> = axes
            .iter()
            .map(|(k, vs)| (k.clone(), Json::Array(vs.iter().map(Value::to_json).collect())))
            .collect();
        doc["sweep"] = json!({
            "grid": Json::Object(axes_json),
            "cap": cap,
            "parallel": parallel,
            "points": points,
        });
    }
    doc
}

/// Serialise, digest-check nothing further, and atomically place the manifest
/// next to the outputs it describes.
pub fn write_manifest(out_dir: &Path, doc: &Json) -> Result<PathBuf, CliError> {
    let path = out_dir.join("manifest.json");
    let mut body = serde_json::to_vec_pretty(doc)
        .map_err(|e| CliError::Fault(format!("manifest serialisation failed: {e}")))?;
    body.push(b'\n');
    write_atomic(&path, &body)
        .map_err(|e| CliError::Fault(format!("writing '{}' failed: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Offset basis for the empty input, and the classic single-letter probe.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("x.csv");
        write_atomic(&target, b"one").unwrap();
        write_atomic(&target, b"two").unwrap();
        assert_eq!(std::fs::read(&target).unwrap(), b"two");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with(".mflab-tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
