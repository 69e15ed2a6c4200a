//! Where a number came from: seed, hash of the full configuration and the
//! source revision.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the configuration's JSON encoding, lowercase hex.
    pub config_hash: String,
    /// `git rev-parse HEAD` of the working directory, if any.
    pub commit: Option<String>,
    pub tool_version: String,
}

impl Provenance {
    pub fn new<T: Serialize>(seed: u64, config: &T) -> Self {
        Provenance {
            seed,
            config_hash: config_hash(config),
            commit: git_commit(Path::new(".")),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configs serialize");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn git_commit(dir: &Path) -> Option<String> {
    let out = Command::new("git").arg("-C").arg(dir).args(["rev-parse", "HEAD"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}
