//! Run records and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{write_json, Error, Result};

pub const RUN_RECORD: &str = "run.json";
pub const OUT_ENV: &str = "DEPTH_DISSECT_OUT";

/// What a command did, written as `run.json` into its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    /// Fully resolved options, enough to repeat the run.
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// The id depends only on the command and its configuration.
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(config.to_string().as_bytes());
        RunRecord {
            run_id: hex::encode(&h.finalize()[..8]),
            command: command.to_string(),
            config,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    /// Record the hash of an input file or directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = if path.is_dir() {
            hash_dir(path)?
        } else {
            hash_file(path)?
        };
        self.input_hashes.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        write_json(&out_dir.join(RUN_RECORD), self)
    }
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of every file under `dir` (relative path and contents, in sorted
/// order). Run records are skipped: they carry wall-clock times.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let walker = WalkDir::new(dir).sort_by_file_name();
    for entry in walker {
        let entry = entry.map_err(|e| Error::format(dir, e.to_string()))?;
        if !entry.file_type().is_file() || entry.file_name() == RUN_RECORD {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walk stays under root");
        let rel = rel.to_string_lossy().replace('\\', "/");
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// An explicit `--out` wins, then `$DEPTH_DISSECT_OUT/<command>`, then `runs/<command>`.
pub fn output_dir(explicit: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_hash_ignores_run_record_but_not_names() {
        let a = tempfile::tempdir().unwrap();
        fs::write(a.path().join("x.txt"), "1").unwrap();
        let before = hash_dir(a.path()).unwrap();
        fs::write(a.path().join(RUN_RECORD), "{}").unwrap();
        assert_eq!(hash_dir(a.path()).unwrap(), before);
        fs::rename(a.path().join("x.txt"), a.path().join("y.txt")).unwrap();
        assert_ne!(hash_dir(a.path()).unwrap(), before);
    }

    #[test]
    fn run_id_tracks_config() {
        let a = RunRecord::new("eval", serde_json::json!({"seed": 1}));
        let b = RunRecord::new("eval", serde_json::json!({"seed": 2}));
        assert_ne!(a.run_id, b.run_id);
        assert_eq!(
            a.run_id,
            RunRecord::new("eval", serde_json::json!({"seed": 1})).run_id
        );
    }
}
