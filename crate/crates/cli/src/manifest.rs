//! `manifest.json`: every artifact in the run directory with its SHA-256.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub sha256: String,
    pub bytes: u64,
    /// Command that wrote the artifact.
    pub command: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    /// Stage name -> derived seed.
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, Entry>,
}

/// Merge `files` (relative to `dir`) into the directory's manifest.
pub fn record(dir: &Path, command: &str, root_seed: u64, seeds: &[(&str, u64)], files: &[&str]) -> anyhow::Result<()> {
    let path = dir.join(FILE);
    let mut m: Manifest = if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        Manifest::default()
    };
    if m.root_seed != root_seed {
        m.seeds.clear();
    }
    m.root_seed = root_seed;
    for (name, s) in seeds {
        m.seeds.insert((*name).to_string(), *s);
    }
    for f in files {
        let bytes = std::fs::read(dir.join(f)).with_context(|| format!("hashing {f}"))?;
        m.artifacts.insert(
            (*f).to_string(),
            Entry { sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64, command: command.into() },
        );
    }
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}
