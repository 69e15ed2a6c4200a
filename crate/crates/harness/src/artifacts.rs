//! Per-attack output files: a JSON record and the rendered target view.

use std::fs;
use std::path::{Path, PathBuf};

use nerfattack_core::attack::{AttackMode, AttackResult};
use nerfattack_core::scene::ppm;
use nerfattack_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::provenance::Provenance;

/// An attack result as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackRecord {
    pub provenance: Option<Provenance>,
    /// Label of the attacked scene.
    pub scene: String,
    pub repeat: usize,
    pub result: AttackResult,
}

/// `attack_<scene>_<mode>_<k>views_<size>_<repeat>`, where `size` is the
/// patch side or `eps` for low-intensity runs.
pub fn artifact_stem(scene: &str, result: &AttackResult, repeat: usize) -> String {
    let cfg = &result.config;
    let size = match cfg.mode {
        AttackMode::Patch => format!("{}px", cfg.patch_size),
        AttackMode::LowIntensity => "eps".to_string(),
    };
    format!("attack_{scene}_{}_{}views_{size}_{repeat}", cfg.mode.as_str(), cfg.attacked_count())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(format!("json: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.into(),
        field: "json".into(),
        reason: e.to_string(),
    })
}

/// Writes `<stem>.json` and, when the render is present, `<stem>.ppm` into
/// `dir`. Returns the JSON path.
pub fn write_attack_artifacts(dir: &Path, scene: &str, repeat: usize, result: &AttackResult) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let stem = artifact_stem(scene, result, repeat);
    let json = dir.join(format!("{stem}.json"));
    let record = AttackRecord { provenance: None, scene: scene.to_string(), repeat, result: result.clone() };
    write_json(&json, &record)?;
    if let Some(img) = &result.rendered {
        ppm::write(&dir.join(format!("{stem}.ppm")), img)?;
    }
    Ok(json)
}
