//! Run manifests and content hashes.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Partial,
}

/// Everything needed to repeat a run: the command line, the fully resolved
/// configuration and hashes of what went in and came out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Values given in more than one layer, and which one won.
    pub overrides: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub input_hash: String,
    pub output_hash: String,
    pub status: RunStatus,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            seed,
            overrides: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            input_hash: String::new(),
            output_hash: String::new(),
            status: RunStatus::Ok,
            started: now(),
            finished: String::new(),
        }
    }

    /// Hash inputs and outputs and write `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.input_hash = tree_hash(&self.inputs)?;
        self.output_hash = tree_hash(&self.outputs)?;
        self.finished = now();
        let path = dir.join(MANIFEST_FILE);
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Git-style blob hash: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect_files(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            collect_files(&e, out)?;
        }
    } else {
        out.push(root.to_path_buf());
    }
    Ok(())
}

/// Hash over every file below `paths` (directories are walked), keyed by
/// the path relative to the listed root, so moving a tree keeps its hash.
pub fn tree_hash(paths: &[PathBuf]) -> Result<String> {
    let mut lines = Vec::new();
    for root in paths {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        let base = if root.is_dir() { root.as_path() } else { root.parent().unwrap_or(Path::new("")) };
        for f in files {
            let bytes = std::fs::read(&f).with_context(|| format!("hashing {}", f.display()))?;
            let rel = f.strip_prefix(base).unwrap_or(&f);
            lines.push(format!("{} {}", blob_hash(&bytes), rel.display()));
        }
    }
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}
