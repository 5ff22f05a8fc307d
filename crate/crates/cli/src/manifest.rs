//! Per-run record of the command, configuration and produced files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use layerseg::dataset::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputFile>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Every regular file below `dir` except the manifest itself, sorted by path.
pub fn list_outputs(dir: &Path) -> Result<Vec<OutputFile>> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    files
        .into_iter()
        .map(|(rel, path)| {
            let bytes = fs::read(&path).at(&path)?;
            Ok(OutputFile {
                path: rel,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walked below root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel != RUN_MANIFEST_FILE && !rel.ends_with(".tmp") {
                out.push((rel, path));
            }
        }
    }
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

impl RunManifest {
    /// Lists the outputs of `dir` and writes the manifest into it.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.outputs = list_outputs(dir)?;
        self.finished_unix = unix_now();
        write_atomic(
            &dir.join(RUN_MANIFEST_FILE),
            serde_json::to_string_pretty(&self)?.as_bytes(),
        )?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
