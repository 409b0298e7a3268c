//! Append-only JSONL label store.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Artifact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionVerdict {
    Corrected,
    NotCorrected,
    #[default]
    Unset,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImprovementVerdict {
    Improved,
    NotImproved,
    #[default]
    Unset,
}

/// Tags for the toy shapes set.
pub const TOY_TAXONOMY: &[&str] = &["blob", "shape", "edge", "background", "colour"];

/// Prefix of ids naming plain generations (`gen-{seed}`).
pub const GENERATED_PREFIX: &str = "gen-";
/// Prefix of ids naming corrected generations (`cor-{seed}-{config hash}`).
pub const CORRECTED_PREFIX: &str = "cor-";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub image_id: String,
    pub latent_seed: u64,
    pub label: Label,
    #[serde(default)]
    pub tags: Vec<String>,
    pub rater: String,
    /// Unix seconds.
    pub timestamp: u64,
    #[serde(default)]
    pub correction_verdict: CorrectionVerdict,
    #[serde(default)]
    pub improvement_verdict: ImprovementVerdict,
}

impl LabelRecord {
    pub fn new(image_id: impl Into<String>, latent_seed: u64, label: Label, rater: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            latent_seed,
            label,
            tags: Vec::new(),
            rater: rater.into(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            correction_verdict: CorrectionVerdict::Unset,
            improvement_verdict: ImprovementVerdict::Unset,
        }
    }

    pub fn is_corrected_image(&self) -> bool {
        self.image_id.starts_with(CORRECTED_PREFIX)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.image_id.is_empty(), InvalidInput, "image id is empty");
        ensure!(!self.rater.is_empty(), InvalidInput, "rater id is empty");
        ensure!(
            self.image_id.starts_with(GENERATED_PREFIX) || self.is_corrected_image(),
            InvalidInput,
            "image id {} is neither a generation nor a corrected generation",
            self.image_id
        );
        let verdicts = self.correction_verdict != CorrectionVerdict::Unset
            || self.improvement_verdict != ImprovementVerdict::Unset;
        ensure!(
            !verdicts || self.is_corrected_image(),
            InvalidInput,
            "verdicts are only allowed on corrected images, not {}",
            self.image_id
        );
        Ok(())
    }
}

/// Label store backed by one JSONL file. Appends are checked against the
/// records already on disk, so two raters can share a file.
#[derive(Debug)]
pub struct LabelStore {
    path: PathBuf,
    records: Vec<LabelRecord>,
    keys: HashSet<(String, String)>,
}

impl LabelStore {
    /// Opens `path`, reading any existing records. A missing file is empty.
    pub fn open(path: &Path) -> Result<Self> {
        let records = if path.exists() { read_labels(path)? } else { Vec::new() };
        let keys = records.iter().map(|r| (r.image_id.clone(), r.rater.clone())).collect();
        Ok(Self {
            path: path.to_path_buf(),
            records,
            keys,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, image_id: &str, rater: &str) -> bool {
        self.keys.contains(&(image_id.to_string(), rater.to_string()))
    }

    pub fn append(&mut self, record: LabelRecord) -> Result<()> {
        record.validate()?;
        let key = (record.image_id.clone(), record.rater.clone());
        if self.keys.contains(&key) {
            return Err(Error::Conflict(format!("{} already labelled by {}", key.0, key.1)));
        }
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        OpenOptions::new().create(true).append(true).open(&self.path)?.write_all(line.as_bytes())?;
        self.keys.insert(key);
        self.records.push(record);
        Ok(())
    }

    pub fn partition(&self) -> Partition {
        partition_by_majority(&self.records)
    }
}

/// Reads and validates every line; blank lines are skipped.
pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate().map_err(|e| err(e.to_string()))?;
        if !seen.insert((rec.image_id.clone(), rec.rater.clone())) {
            return Err(err(format!("duplicate label for {} by {}", rec.image_id, rec.rater)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Plain generations split by majority label; `seeds` are in image-id order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub artifact: Vec<u64>,
    pub normal: Vec<u64>,
}

/// Majority vote per plain generation. A tie counts as normal; corrected
/// images are ignored.
pub fn partition_by_majority(records: &[LabelRecord]) -> Partition {
    let mut votes: BTreeMap<(u64, &str), (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.image_id.starts_with(GENERATED_PREFIX)) {
        let v = votes.entry((r.latent_seed, r.image_id.as_str())).or_default();
        match r.label {
            Label::Artifact => v.0 += 1,
            Label::Normal => v.1 += 1,
        }
    }
    let mut p = Partition::default();
    for ((seed, _), (a, n)) in votes {
        if a > n {
            p.artifact.push(seed);
        } else {
            p.normal.push(seed);
        }
    }
    p
}
