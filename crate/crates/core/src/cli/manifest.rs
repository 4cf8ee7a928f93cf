use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileRecord {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub protocol: String,
    pub eta: f64,
    pub seed: u64,
}

/// Provenance of one command invocation. Contains no timestamps, so an
/// identical invocation writes an identical manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub dataset: Option<FileRecord>,
    pub pattern: Option<PatternSpec>,
    pub seed: u64,
    pub outputs: Vec<FileRecord>,
}

impl RunManifest {
    pub fn new(command: &str, config: BTreeMap<String, String>, seed: u64) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            dataset: None,
            pattern: None,
            seed,
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileRecord::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// `<file>.manifest.json` next to a single-file output.
pub fn sidecar_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("a/b.jsonl")), Path::new("a/b.jsonl.manifest.json"));
    }
}
