//! Run manifests: what a command read, what it wrote, and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use unisod::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: BTreeMap<String, String>,
    /// SHA-256 over the resolved config and every input file, in order.
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<OutputFile>,
    pub wall_time_s: f64,
}

/// Accumulates a content hash over inputs as a command reads them.
#[derive(Default)]
pub struct InputHasher {
    hasher: Sha256,
    paths: Vec<PathBuf>,
}

impl InputHasher {
    pub fn text(&mut self, label: &str, text: &str) {
        self.hasher.update(format!("{label} {}\0", text.len()));
        self.hasher.update(text.as_bytes());
    }

    pub fn file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.hasher.update(format!("blob {}\0", bytes.len()));
        self.hasher.update(&bytes);
        self.paths.push(path.to_path_buf());
        Ok(())
    }

    pub fn finish(self) -> (String, Vec<PathBuf>) {
        (hex(&self.hasher.finalize()), self.paths)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn describe_output(path: &Path) -> Result<OutputFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(OutputFile {
        path: path.to_path_buf(),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

impl RunManifest {
    /// Writes pretty JSON through a temporary sibling and a rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest is plain data");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}
