//! On-disk layout of a workbench data root and typed loaders for it.
//!
//! ```text
//! manifest.json
//! data/reals.ust
//! models/{generator,discriminator,planted,classifier}.ust
//! models/{train_report,plant,classifier_report}.json
//! samples/samples.json, samples/gen-{seed}.png
//! labels/labels.jsonl
//! masks/gen-{seed}.json, masks/gen-{seed}.png
//! tables/{thresholds,ds,fid-rank}-{layer}.json
//! represent/unit-{layer}-{unit}.{png,json}
//! corrected/{config hash}/cor-{seed}-{config hash}.{png,json}
//! reports/{eval,dvalue,sweep}.json, reports/sweep.{csv,png}
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::correct::{CorrectionConfig, LayerTables};
use crate::error::{ensure, Error, Result};
use crate::explain::ClassifierModel;
use crate::genmodel::{Discriminator, GeneratorModel, UnitId};
use crate::identify::{ThresholdTable, UnitScoreTable};
use crate::mask::ExplanationMask;
use crate::tensor::Tensor3;

use super::manifest::sha256_hex;

pub const DATA_ENV: &str = "UNITSURGEON_DATA";

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

/// Seeds drawn by `sample` with their oracle trigger state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub first_seed: u64,
    pub seeds: Vec<u64>,
    pub triggered: Vec<bool>,
}

impl SampleSet {
    pub fn artifact_seeds(&self) -> Vec<u64> {
        self.seeds.iter().zip(&self.triggered).filter(|(_, t)| **t).map(|(s, _)| *s).collect()
    }

    pub fn normal_seeds(&self) -> Vec<u64> {
        self.seeds.iter().zip(&self.triggered).filter(|(_, t)| !**t).map(|(s, _)| *s).collect()
    }
}

/// Ground truth written next to the planted checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub ground_truth: Vec<UnitId>,
    pub precursors: Vec<UnitId>,
    pub trigger_fraction: f64,
}

/// Sidecar of one corrected image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub latent_seed: u64,
    pub config: CorrectionConfig,
    pub config_hash: String,
    pub table_hash: String,
    pub image_sha256: String,
}

pub fn generated_id(seed: u64) -> String {
    format!("gen-{seed}")
}

pub fn corrected_id(seed: u64, config_hash: &str) -> String {
    format!("cor-{seed}-{config_hash}")
}

/// Seed of a `gen-{seed}` id.
pub fn parse_generated_id(id: &str) -> Option<u64> {
    id.strip_prefix("gen-")?.parse().ok()
}

/// Seed and config hash of a `cor-{seed}-{hash}` id.
pub fn parse_corrected_id(id: &str) -> Option<(u64, &str)> {
    let rest = id.strip_prefix("cor-")?;
    let (seed, hash) = rest.split_once('-')?;
    let ok = !hash.is_empty() && hash.chars().all(|c| c.is_ascii_hexdigit());
    ok.then_some((seed.parse().ok()?, hash))
}

/// Hash over the score tables used for a correction (layers `1..=l`).
pub fn tables_hash(tables: &LayerTables, l: usize) -> String {
    let used: Vec<&UnitScoreTable> = tables.range(1..=l).map(|(_, t)| t).collect();
    sha256_hex(&serde_json::to_vec(&used).expect("tables serialise"))[..16].to_string()
}

pub fn save_images(path: &Path, images: &[Tensor3]) -> Result<()> {
    ensure!(!images.is_empty(), InvalidInput, "no images to save");
    let shape = images[0].shape();
    ensure!(images.iter().all(|i| i.shape() == shape), InvalidInput, "images differ in shape");
    let mut a = TensorArchive::new(serde_json::json!({"kind": "images"}));
    let mut data = Vec::with_capacity(images.len() * images[0].data().len());
    for i in images {
        data.extend_from_slice(i.data());
    }
    a.push("images", &[images.len(), shape[0], shape[1], shape[2]], data)?;
    a.write(path)
}

pub fn load_images(path: &Path) -> Result<Vec<Tensor3>> {
    let a = TensorArchive::read(path)?;
    let arr = a.get("images").ok_or_else(|| Error::Archive("missing images array".into()))?;
    ensure!(arr.shape.len() == 4, InvalidInput, "images array must be 4-D");
    let [n, c, h, w] = [arr.shape[0], arr.shape[1], arr.shape[2], arr.shape[3]];
    (0..n)
        .map(|i| Tensor3::from_vec(c, h, w, arr.data[i * c * h * w..(i + 1) * c * h * w].to_vec()))
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn read_archive(path: &Path) -> Result<TensorArchive> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    TensorArchive::read(path)
}

/// Every `ds-{layer}.json` in `dir`; a missing directory holds none.
pub fn score_tables_in(dir: &Path) -> Result<LayerTables> {
    let mut out = LayerTables::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        let layer = name.strip_prefix("ds-").and_then(|r| r.strip_suffix(".json")).and_then(|l| l.parse().ok());
        if let Some(l) = layer {
            out.insert(l, UnitScoreTable::read(&path)?);
        }
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `UNITSURGEON_DATA`, or `./unitsurgeon-data` when unset.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| "unitsurgeon-data".into()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn reals_path() -> PathBuf {
        "data/reals.ust".into()
    }
    pub fn generator_path() -> PathBuf {
        "models/generator.ust".into()
    }
    pub fn discriminator_path() -> PathBuf {
        "models/discriminator.ust".into()
    }
    pub fn train_report_path() -> PathBuf {
        "models/train_report.json".into()
    }
    pub fn planted_path() -> PathBuf {
        "models/planted.ust".into()
    }
    pub fn plant_record_path() -> PathBuf {
        "models/plant.json".into()
    }
    pub fn classifier_path() -> PathBuf {
        "models/classifier.ust".into()
    }
    pub fn classifier_report_path() -> PathBuf {
        "models/classifier_report.json".into()
    }
    pub fn samples_path() -> PathBuf {
        "samples/samples.json".into()
    }
    pub fn sample_png_path(seed: u64) -> PathBuf {
        format!("samples/{}.png", generated_id(seed)).into()
    }
    pub fn labels_path() -> PathBuf {
        "labels/labels.jsonl".into()
    }
    pub fn mask_path(seed: u64) -> PathBuf {
        format!("masks/{}.json", generated_id(seed)).into()
    }
    pub fn mask_png_path(seed: u64) -> PathBuf {
        format!("masks/{}.png", generated_id(seed)).into()
    }
    pub fn thresholds_path(layer: usize) -> PathBuf {
        format!("tables/thresholds-{layer}.json").into()
    }
    pub fn ds_path(layer: usize) -> PathBuf {
        format!("tables/ds-{layer}.json").into()
    }
    pub fn fid_rank_path(layer: usize) -> PathBuf {
        format!("tables/fid-rank-{layer}.json").into()
    }
    pub fn represent_path(unit: UnitId, ext: &str) -> PathBuf {
        format!("represent/unit-{}-{}.{ext}", unit.layer, unit.unit).into()
    }
    pub fn corrected_dir(config_hash: &str) -> PathBuf {
        format!("corrected/{config_hash}").into()
    }
    pub fn corrected_path(seed: u64, config_hash: &str, ext: &str) -> PathBuf {
        Self::corrected_dir(config_hash).join(format!("{}.{ext}", corrected_id(seed, config_hash)))
    }
    pub fn latest_corrected_path() -> PathBuf {
        "corrected/latest".into()
    }
    pub fn report_path(name: &str) -> PathBuf {
        format!("reports/{name}").into()
    }

    pub fn reals(&self) -> Result<Vec<Tensor3>> {
        let p = self.path(Self::reals_path());
        if !p.exists() {
            return Err(Error::NotFound(p.display().to_string()));
        }
        load_images(&p)
    }

    pub fn generator(&self) -> Result<GeneratorModel> {
        GeneratorModel::from_archive(&read_archive(&self.path(Self::generator_path()))?)
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        Discriminator::from_archive(&read_archive(&self.path(Self::discriminator_path()))?)
    }

    pub fn planted(&self) -> Result<GeneratorModel> {
        let m = GeneratorModel::from_archive(&read_archive(&self.path(Self::planted_path()))?)?;
        ensure!(m.plant().is_some(), InvalidInput, "planted checkpoint carries no plant");
        Ok(m)
    }

    pub fn plant_record(&self) -> Result<PlantRecord> {
        read_json(&self.path(Self::plant_record_path()))
    }

    pub fn classifier(&self) -> Result<ClassifierModel> {
        ClassifierModel::from_archive(&read_archive(&self.path(Self::classifier_path()))?)
    }

    pub fn has_classifier(&self) -> bool {
        self.path(Self::classifier_path()).exists()
    }

    pub fn samples(&self) -> Result<SampleSet> {
        read_json(&self.path(Self::samples_path()))
    }

    pub fn mask(&self, seed: u64) -> Result<ExplanationMask> {
        read_json(&self.path(Self::mask_path(seed)))
    }

    pub fn thresholds(&self, layer: usize) -> Result<ThresholdTable> {
        read_json(&self.path(Self::thresholds_path(layer)))
    }

    pub fn score_table(&self, layer: usize) -> Result<UnitScoreTable> {
        let p = self.path(Self::ds_path(layer));
        if !p.exists() {
            return Err(Error::NotFound(p.display().to_string()));
        }
        UnitScoreTable::read(&p)
    }

    /// Every `tables/ds-{layer}.json` present.
    pub fn score_tables(&self) -> Result<LayerTables> {
        score_tables_in(&self.path("tables"))
    }

    pub fn provenance(&self, seed: u64, config_hash: &str) -> Result<Provenance> {
        read_json(&self.path(Self::corrected_path(seed, config_hash, "json")))
    }

    pub fn write_json<T: Serialize>(&self, rel: &Path, value: &T) -> Result<()> {
        write_json(&self.path(rel), value)
    }

    pub fn write_bytes(&self, rel: &Path, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(p, bytes)?;
        Ok(())
    }

    pub fn write_archive(&self, rel: &Path, archive: &TensorArchive) -> Result<()> {
        let p = self.path(rel);
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d)?;
        }
        archive.write(&p)
    }
}
