use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Seeds a command resolved from flags and config.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub train: Option<u64>,
    pub attack: Option<u64>,
    pub runs: Vec<u64>,
}

/// Inputs of one command invocation, one JSON line per invocation in `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seeds: ResolvedSeeds,
    /// SHA-256 of the input bar data.
    pub data_digest: String,
    /// SHA-256 of the checkpoint file read by the command, if any.
    pub checkpoint_digest: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, out_dir: &Path, seeds: ResolvedSeeds, data_digest: String) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(Path::to_path_buf),
            out_dir: out_dir.to_path_buf(),
            seeds,
            data_digest,
            checkpoint_digest: None,
        }
    }

    /// Appends this manifest to `dir/manifest.jsonl`, creating the directory if needed.
    pub fn append(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut line = serde_json::to_string(self).map_err(|e| CliError::json(&path, e))?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::io(&path, e))?;
        file.write_all(line.as_bytes()).map_err(|e| CliError::io(&path, e))
    }
}

pub fn read_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::json(&path, e)))
        .collect()
}
