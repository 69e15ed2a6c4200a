//! Rebuilds tables and plots from a directory of stored results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nerfattack_core::attack::AttackMode;
use nerfattack_core::scene::EditKind;
use nerfattack_core::{Error, Result};

use crate::artifacts::{read_json, AttackRecord};
use crate::cli::write_sweep_outputs;
use crate::provenance::Provenance;
use crate::sweep::{aggregate, RunRecord, SweepKind, SweepResult};

fn json_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::Io { path: dir.into(), source: e })?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with(prefix) && name.ends_with(".json") && !name.ends_with(".provenance.json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Groups single attack records into one result per mode. The series is the
/// source-view count (low intensity) or the patch side (patch); scenes are
/// numbered by label order.
pub fn aggregate_records(records: &[AttackRecord]) -> Vec<SweepResult> {
    let mut labels: Vec<&str> = records.iter().map(|r| r.scene.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut by_kind: BTreeMap<SweepKind, Vec<RunRecord>> = BTreeMap::new();
    for rec in records {
        let cfg = &rec.result.config;
        let (kind, series) = match cfg.mode {
            AttackMode::LowIntensity => (SweepKind::Views, cfg.attacked_mask.len()),
            AttackMode::Patch => (SweepKind::Patch, cfg.patch_size),
        };
        let scene = labels.binary_search(&rec.scene.as_str()).expect("label collected above");
        by_kind.entry(kind).or_default().push(RunRecord {
            series,
            k: cfg.attacked_count(),
            scene,
            repeat: rec.repeat,
            edit: EditKind::Modify,
            attacked: cfg.attacked_mask.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect(),
            baseline_distance: rec.result.baseline_distance,
            final_distance: rec.result.final_distance,
            success: rec.result.success,
            constraints_ok: None,
            wall_seconds: rec.result.wall_seconds,
        });
    }
    by_kind.into_iter().map(|(kind, runs)| aggregate(kind, runs)).collect()
}

/// For every `sweep_*.json` in `results`, writes its CSV, SVG and
/// provenance into `dest`; every `attack*.json` is folded into
/// `attacks_<kind>.*`. Returns the files written.
pub fn report_dir(results: &Path, dest: &Path, seed: Option<u64>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for path in json_files(results, "sweep_")? {
        let result: SweepResult = read_json(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).expect("utf-8 name").to_string();
        written.extend(write_sweep_outputs(&result, dest, &stem)?);
    }
    let records =
        json_files(results, "attack")?.iter().map(|p| read_json::<AttackRecord>(p)).collect::<Result<Vec<_>>>()?;
    for mut result in aggregate_records(&records) {
        let hashes: Vec<&str> =
            records.iter().filter_map(|r| r.provenance.as_ref()).map(|p| p.config_hash.as_str()).collect();
        result.provenance = Some(Provenance::new(seed.unwrap_or(0), &hashes));
        let stem = format!("attacks_{}", result.kind.as_str());
        written.extend(write_sweep_outputs(&result, dest, &stem)?);
    }
    if written.is_empty() {
        return Err(Error::Contract(format!("no sweep_*.json or attack*.json results in {}", results.display())));
    }
    Ok(written)
}
