//! Run manifest: the top-level seed, what each command read and wrote, and
//! content hashes for every emitted file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Hash of a value's JSON form, shortened to 16 hex digits.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serialisable config");
    sha256_hex(&json)[..16].to_string()
}

/// Stable per-command seed derived from the run seed.
pub fn derive_seed(run_seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Paths relative to the data root.
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub tool_version: String,
    pub steps: Vec<StepRecord>,
    /// Every emitted file with its sha256, latest write wins.
    pub files: BTreeMap<PathBuf, String>,
}

impl RunManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            run_id: format!("run-{}", &sha256_hex(&seed.to_le_bytes())[..12]),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            steps: Vec::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&std::fs::read(path)?)?))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Records a step, hashing its outputs (which must exist under `root`).
    /// A step with the same command and outputs replaces the earlier one.
    pub fn record(&mut self, root: &Path, step: StepRecord) -> Result<()> {
        for out in &step.outputs {
            self.files.insert(out.clone(), file_sha256(&root.join(out))?);
        }
        self.steps.retain(|s| !(s.command == step.command && s.outputs == step.outputs));
        self.steps.push(step);
        Ok(())
    }

    /// Re-hashes every listed file.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (path, hash) in &self.files {
            let full = root.join(path);
            if !full.exists() {
                return Err(Error::NotFound(format!("{} listed in the manifest", path.display())));
            }
            let now = file_sha256(&full)?;
            if &now != hash {
                return Err(Error::Archive(format!("{} changed since it was written", path.display())));
            }
        }
        Ok(())
    }
}
