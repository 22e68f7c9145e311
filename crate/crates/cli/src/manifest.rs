use std::fs;
use std::path::{Path, PathBuf};

use comorbid::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// First 64 bits of the SHA-256 of a file's contents, as hex.
pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::File {
        path: path.into(),
        message: e.to_string(),
    })?;
    let hash = Sha256::digest(&bytes);
    Ok(hash[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Fully resolved settings; enough to re-run the command.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub started: String,
    pub finished: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            tool: "comorbid".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now(),
            finished: String::new(),
            status: RunStatus::Complete,
            failed_stage: None,
        }
    }

    pub fn add_inputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.inputs.push(FileDigest {
                path: p.clone(),
                digest: digest_file(p)?,
            });
        }
        Ok(())
    }

    /// Record `outputs` (absolute or relative to `dir`) with their digests.
    pub fn set_outputs(&mut self, dir: &Path, outputs: &[PathBuf]) -> Result<()> {
        let mut list = Vec::with_capacity(outputs.len());
        for p in outputs {
            let rel = p.strip_prefix(dir).unwrap_or(p).to_path_buf();
            list.push(FileDigest {
                digest: digest_file(&dir.join(&rel))?,
                path: rel,
            });
        }
        list.sort_by(|a, b| a.path.cmp(&b.path));
        list.dedup();
        self.outputs = list;
        Ok(())
    }

    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = now();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialise manifest: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::File {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::File {
            path: path.into(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.into(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }

    pub fn changed_inputs(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .filter(|f| digest_file(&f.path).ok().as_deref() != Some(f.digest.as_str()))
            .map(|f| f.path.clone())
            .collect()
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}
