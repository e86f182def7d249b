use std::fs;
use std::path::{Path, PathBuf};

use blockssl::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RECORD_FILE: &str = "record.json";

/// Provenance of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub config_hash: String,
    /// Tree hash over the output files (see [`content_hash`]).
    pub content_hash: String,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn new(command: &str, config: &impl Serialize, root: &Path, outputs: Vec<PathBuf>) -> Result<Self> {
        let config_hash = config_hash(config)?;
        let content_hash = content_hash(root, &outputs)?;
        Ok(Self {
            run_id: config_hash[..12].to_string(),
            command: command.to_string(),
            config_hash,
            content_hash,
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RECORD_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| io_err(&path, e))
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

pub fn config_hash(config: &impl Serialize) -> Result<String> {
    // serde_json::Value keeps object keys sorted, which makes the text canonical
    let value = serde_json::to_value(config)?;
    Ok(hex::encode(Sha256::digest(value.to_string().as_bytes())))
}

/// Hash of one file in the style of a git blob: `H("blob <len>\0" ‖ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash over `(relative path, blob hash)` lines sorted by path.
pub fn content_hash(root: &Path, files: &[PathBuf]) -> Result<String> {
    let mut lines = Vec::with_capacity(files.len());
    for rel in files {
        let path = root.join(rel);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        lines.push(format!("{} {}\n", blob_hash(&bytes), rel.to_string_lossy().replace('\\', "/")));
    }
    lines.sort_by(|a, b| a[65..].cmp(&b[65..]));
    Ok(hex::encode(Sha256::digest(lines.concat().as_bytes())))
}
