//! Run manifests: what was run, with which inputs, producing which bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the manifest's directory for outputs, as given for inputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Command-line arguments after the subcommand, as passed.
    pub args: Vec<String>,
    pub seed: u64,
    /// Resolved configuration as `key=value` lines.
    pub config: String,
    pub inputs: Vec<FileHash>,
    /// Outputs whose bytes are a deterministic function of the inputs.
    pub outputs: Vec<FileHash>,
    /// Outputs excluded from replay comparison (wall-clock content).
    #[serde(default)]
    pub volatile: Vec<String>,
    #[serde(default)]
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

pub const MANIFEST_NAME: &str = "run_manifest.json";

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64, config: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            volatile: Vec::new(),
            metrics: serde_json::Map::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        for f in files {
            self.inputs.push(FileHash {
                path: f.display().to_string(),
                sha256: sha256_file(&f)?,
            });
        }
        Ok(())
    }

    /// Hash `name` inside `dir` and record it as a deterministic output.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.push(FileHash {
            path: name.to_string(),
            sha256: sha256_file(&dir.join(name))?,
        });
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Output entries whose hash differs between `self` and `other`.
    pub fn output_mismatches(&self, other: &RunManifest) -> Vec<String> {
        let mut bad = Vec::new();
        for o in &self.outputs {
            match other.outputs.iter().find(|x| x.path == o.path) {
                Some(x) if x.sha256 == o.sha256 => {}
                _ => bad.push(o.path.clone()),
            }
        }
        for x in &other.outputs {
            if !self.outputs.iter().any(|o| o.path == x.path) {
                bad.push(x.path.clone());
            }
        }
        bad
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}
