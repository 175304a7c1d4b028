//! `manifest.json`: effective config, derived seeds and artifact checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SEED_COMPONENTS};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Effective config of the last command, keyed by command name.
    pub commands: BTreeMap<String, serde_json::Value>,
    /// Artifact name (relative to the run directory) to SHA-256.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Merges one command's outputs into the run directory's manifest.
pub fn record(out_dir: &Path, command: &str, config: &RunConfig, written: &[&str]) -> Result<()> {
    let path = out_dir.join(FILE_NAME);
    let mut manifest: Manifest = if path.exists() {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        Manifest::default()
    };
    if !manifest.commands.is_empty() && manifest.seed != config.seed {
        anyhow::bail!(
            "{} belongs to seed {}, not {}; use a fresh --out-dir",
            path.display(),
            manifest.seed,
            config.seed
        );
    }
    manifest.seed = config.seed;
    manifest.seeds = SEED_COMPONENTS
        .iter()
        .map(|c| (c.to_string(), config.component_seed(c)))
        .collect();
    manifest
        .commands
        .insert(command.to_string(), serde_json::to_value(config)?);
    for name in written {
        manifest
            .files
            .insert(name.to_string(), sha256_file(&out_dir.join(name))?);
    }
    let body = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}
