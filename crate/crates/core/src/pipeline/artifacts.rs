use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Directory holding rows only the evaluation-side stages may read.
pub const HOLDOUT_DIR: &str = "holdout";

const HOLDOUT_READERS: [&str; 3] = ["evaluate", "explain", "distill"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    /// Path (relative to the run directory, or as given for external
    /// inputs) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl StageManifest {
    pub fn path(stage: &str) -> String {
        format!("manifests/{stage}.json")
    }
}

/// Tracks one stage's reads and writes under the run directory and writes
/// its manifest and log on `finish`.
pub struct Stage {
    root: PathBuf,
    name: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    log: Vec<String>,
}

impl Stage {
    pub fn begin(root: &Path, name: &str, seed: u64) -> Self {
        Self {
            root: root.to_path_buf(),
            name: name.to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    /// Checks every output of `upstream` against its recorded hash.
    pub fn require(&mut self, upstream: &str) -> Result<StageManifest> {
        let rel = StageManifest::path(upstream);
        let manifest: StageManifest = serde_json::from_slice(&self.read_bytes(&rel)?)?;
        for (file, hash) in &manifest.outputs {
            let path = self.root.join(file);
            let bytes = fs::read(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
            if sha256_hex(&bytes) != *hash {
                return Err(Error::HashMismatch(path));
            }
        }
        Ok(manifest)
    }

    fn read_bytes(&mut self, rel: &str) -> Result<Vec<u8>> {
        if rel.starts_with(HOLDOUT_DIR) && !HOLDOUT_READERS.contains(&self.name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "stage `{}` may not read held-out rows ({rel})",
                self.name
            )));
        }
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|_| Error::MissingArtifact(path))?;
        self.inputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read(&mut self, rel: &str) -> Result<String> {
        let bytes = self.read_bytes(rel)?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("{rel} is not UTF-8: {e}")))
    }

    /// Reads a file outside the run directory (the raw data).
    pub fn read_external(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(value)?)
    }

    /// Writes the stage log and manifest.
    pub fn finish(mut self) -> Result<StageManifest> {
        let log = self.log.join("\n") + "\n";
        let log_rel = format!("logs/{}.log", self.name);
        self.write(&log_rel, log)?;
        let manifest = StageManifest {
            stage: self.name.clone(),
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.root.join(StageManifest::path(&self.name));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}
