//! Run manifest and the output directory protocol: artifacts are staged in a
//! hidden directory and moved into place only when the run succeeds, and the
//! manifest is written last through a rename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Command, Value};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Entries a run may create next to the manifest.
pub const ARTIFACT_ENTRIES: [&str; 4] = ["checkpoint.bin", "images", "masks", "traces"];
const STAGING: &str = ".staging";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Every key with defaults materialized.
    pub config: BTreeMap<String, Value>,
    pub seed_rule: String,
    pub derived_seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by config key (list entries get `[i]`).
    pub input_digests: BTreeMap<String, String>,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    /// Loss and objective summaries; full traces live under `traces/`.
    pub summary: serde_json::Value,
    pub wall_clock_seconds: f64,
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::output("cannot read input", path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `manifest.json` through a temporary file and a rename.
pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    fs::write(&tmp, text).map_err(|e| CliError::output("cannot write manifest", &tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| CliError::output("cannot write manifest", &path, e))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::output("cannot read manifest", &path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
}

/// Output directory of one run.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    staging: PathBuf,
}

fn remove_entry(path: &Path) -> std::io::Result<()> {
    match fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => fs::remove_dir_all(path),
        Ok(_) => fs::remove_file(path),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

impl OutputDir {
    /// Creates `root` and removes artifacts and staging left by earlier runs.
    pub fn prepare(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::output("cannot create output directory", root, e))?;
        let out = Self {
            root: root.to_path_buf(),
            staging: root.join(STAGING),
        };
        out.clear()?;
        fs::create_dir(&out.staging).map_err(|e| CliError::output("cannot create staging directory", &out.staging, e))?;
        Ok(out)
    }

    fn clear(&self) -> Result<(), CliError> {
        for name in ARTIFACT_ENTRIES.iter().chain([&STAGING, &MANIFEST_FILE]) {
            let p = self.root.join(name);
            remove_entry(&p).map_err(|e| CliError::output("cannot clear output directory", &p, e))?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` inside the staging area.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.staging.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::output("cannot create directory", parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::output("cannot write artifact", &path, e))
    }

    /// Moves staged artifacts into place.
    pub fn commit(&self) -> Result<(), CliError> {
        let entries = fs::read_dir(&self.staging).map_err(|e| CliError::output("cannot read staging", &self.staging, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::output("cannot read staging", &self.staging, e))?;
            let dest = self.root.join(entry.file_name());
            fs::rename(entry.path(), &dest).map_err(|e| CliError::output("cannot move artifact", &dest, e))?;
        }
        fs::remove_dir(&self.staging).map_err(|e| CliError::output("cannot remove staging", &self.staging, e))
    }

    /// Drops everything this run wrote so only the manifest will remain.
    pub fn abort(&self) {
        if let Err(e) = self.clear() {
            log::error!("{e}");
        }
    }
}
