//! Per-invocation run manifest. It records only what determines the outputs
//! (no timestamps, no absolute paths) so reruns produce identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use maseg_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::{PipelineConfig, Stage};
use crate::dataset::write_json;

pub const RUN_FILE: &str = "run.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeDigest {
    pub role: String,
    pub files: usize,
    pub sha256: String,
}

/// Digest over every regular file below `root`: the SHA-256 of the sorted
/// lines `<relative path>\t<file sha256>`. A single file digests the same way
/// with its own name as the path.
pub fn tree_digest(role: &str, root: &Path) -> Result<TreeDigest> {
    let mut lines = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = match entry.path().strip_prefix(root) {
            Ok(r) if !r.as_os_str().is_empty() => r.to_path_buf(),
            _ => entry.file_name().into(),
        };
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        lines.push(format!("{rel}\t{}\n", sha256_hex(&bytes)));
    }
    lines.sort();
    Ok(TreeDigest {
        role: role.to_string(),
        files: lines.len(),
        sha256: sha256_hex(lines.concat().as_bytes()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub versions: BTreeMap<&'static str, &'static str>,
    pub seed: u64,
    pub stage_seeds: BTreeMap<&'static str, u64>,
    pub config_sha256: String,
    pub config: PipelineConfig,
    /// Command-line settings that override the config for this run.
    pub overrides: BTreeMap<String, String>,
    pub inputs: Vec<TreeDigest>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        let json = serde_json::to_vec(cfg).expect("config serializes");
        RunManifest {
            command: command.to_string(),
            versions: BTreeMap::from([
                ("maseg-cli", env!("CARGO_PKG_VERSION")),
                ("maseg-core", maseg_core::VERSION),
            ]),
            seed: cfg.seed,
            stage_seeds: Stage::ALL
                .iter()
                .map(|&s| (s.name(), cfg.stage_seed(s)))
                .collect(),
            config_sha256: sha256_hex(&json),
            config: cfg.clone(),
            overrides: BTreeMap::new(),
            inputs: Vec::new(),
        }
    }

    pub fn input(mut self, role: &str, root: &Path) -> Result<Self> {
        self.inputs.push(tree_digest(role, root)?);
        Ok(self)
    }

    pub fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.overrides.insert(key.to_string(), value.to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_FILE), self)
    }
}
