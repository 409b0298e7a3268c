//! End-to-end building blocks shared by the CLI, the service, the examples
//! and the acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;

use crate::correct::LayerTables;
use crate::data::shapes_dataset;
use crate::error::Result;
use crate::explain::{
    pretrain_extractor, train_artifact_classifier, ArtifactClass, ClassifierConfig, ClassifierModel,
    ClassifierReport, FeatureExtractor, PretrainConfig,
};
use crate::genmodel::{
    plant_artifact_units, train_toy_pair, Discriminator, GeneratorModel, LatentCode, PlantSpec, PlantedGenerator,
    TrainConfig, TrainReport,
};
use crate::identify::{compute_thresholds, defective_scores, ArtifactSample, ThresholdTable, UnitScoreTable};
use crate::tensor::Tensor3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub seed: u64,
    pub dataset_size: usize,
    pub train: TrainConfig,
    pub plant_layer: usize,
    pub planted_units: usize,
    pub plant: PlantSpec,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset_size: 2000,
            train: TrainConfig::default(),
            plant_layer: 2,
            planted_units: 8,
            plant: PlantSpec::default(),
        }
    }
}

/// Trained toy pair plus a planted copy of the generator.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub reals: Vec<Tensor3>,
    pub base: GeneratorModel,
    pub discriminator: Discriminator,
    pub train_report: TrainReport,
    pub planted: PlantedGenerator,
}

pub fn build_fixture(config: &FixtureConfig) -> Result<Fixture> {
    let reals = shapes_dataset(config.dataset_size, config.seed);
    let (base, discriminator, train_report) = train_toy_pair(&reals, &config.train, config.seed)?;
    let planted = plant_on(&base, config)?;
    Ok(Fixture {
        reals,
        base,
        discriminator,
        train_report,
        planted,
    })
}

impl FixtureConfig {
    /// Short content hash naming the cached training outputs.
    pub fn cache_key(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn plant_on(base: &GeneratorModel, config: &FixtureConfig) -> Result<PlantedGenerator> {
    let picked = PlantSpec::random_units(base, config.plant_layer, config.planted_units, config.seed ^ 0x5eed)?;
    let spec = PlantSpec {
        layer: config.plant_layer,
        units: picked.units,
        ..config.plant.clone()
    };
    plant_artifact_units(base, &spec, config.seed.wrapping_add(1))
}

/// Like [`build_fixture`], but reuses the trained pair stored under
/// `cache_dir` when one exists for the same configuration.
pub fn load_or_build_fixture(config: &FixtureConfig, cache_dir: &Path) -> Result<Fixture> {
    let dir = cache_dir.join(format!("fixture-{}", config.cache_key()));
    let (g, d, r) = (dir.join("generator.ust"), dir.join("discriminator.ust"), dir.join("train_report.json"));
    if g.exists() && d.exists() && r.exists() {
        let base = GeneratorModel::from_archive(&TensorArchive::read(&g)?)?;
        let discriminator = Discriminator::from_archive(&TensorArchive::read(&d)?)?;
        let train_report: TrainReport = serde_json::from_slice(&std::fs::read(&r)?)?;
        let planted = plant_on(&base, config)?;
        return Ok(Fixture {
            reals: shapes_dataset(config.dataset_size, config.seed),
            base,
            discriminator,
            train_report,
            planted,
        });
    }
    let fixture = build_fixture(config)?;
    // written aside and renamed, so concurrent builders never see half an entry
    let tmp = cache_dir.join(format!(".fixture-{}-{}", config.cache_key(), std::process::id()));
    std::fs::create_dir_all(&tmp)?;
    fixture.base.to_archive()?.write(&tmp.join("generator.ust"))?;
    fixture.discriminator.to_archive()?.write(&tmp.join("discriminator.ust"))?;
    std::fs::write(tmp.join("train_report.json"), serde_json::to_vec(&fixture.train_report)?)?;
    if std::fs::rename(&tmp, &dir).is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    Ok(fixture)
}

/// Seeds in `first..` sorted into triggered and untriggered latents.
pub fn split_latents(
    planted: &PlantedGenerator,
    count_each: usize,
    first_seed: u64,
) -> (Vec<(u64, LatentCode)>, Vec<(u64, LatentCode)>) {
    (
        planted.latents_where(true, count_each, first_seed),
        planted.latents_where(false, count_each, first_seed),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierPipelineConfig {
    pub pretrain: PretrainConfig,
    pub head: ClassifierConfig,
    /// Generations per class (artifact, normal) and real images used.
    pub per_class: usize,
    pub first_seed: u64,
}

impl Default for ClassifierPipelineConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            head: ClassifierConfig::default(),
            per_class: 300,
            first_seed: 1_000_000,
        }
    }
}

/// Pretrains an extractor on real vs planted-model generations, freezes it
/// and fits the three-way head on oracle-labelled generations.
pub fn build_classifier(
    planted: &PlantedGenerator,
    reals: &[Tensor3],
    config: &ClassifierPipelineConfig,
    seed: u64,
) -> Result<(ClassifierModel, ClassifierReport)> {
    let (art, norm) = split_latents(planted, config.per_class, config.first_seed);
    let model = &planted.model;
    let mut generations = Vec::with_capacity(2 * config.per_class);
    for ((_, a), (_, n)) in art.iter().zip(&norm) {
        generations.push((model.image(a)?, ArtifactClass::Artifact));
        generations.push((model.image(n)?, ArtifactClass::Normal));
    }
    classifier_from_generations(&generations, reals, config, seed)
}

/// Same recipe for generations labelled elsewhere (for instance by raters).
/// At most `config.per_class` reals join the head's training set.
pub fn classifier_from_generations(
    generations: &[(Tensor3, ArtifactClass)],
    reals: &[Tensor3],
    config: &ClassifierPipelineConfig,
    seed: u64,
) -> Result<(ClassifierModel, ClassifierReport)> {
    let shape = generations
        .first()
        .map(|(i, _)| i.shape())
        .ok_or_else(|| crate::Error::Dataset("no labelled generations".into()))?;
    let fakes: Vec<Tensor3> = generations.iter().map(|(i, _)| i.clone()).collect();
    let real_subset: Vec<Tensor3> = reals.iter().take(config.per_class).cloned().collect();
    let extractor = pretrain_extractor(
        FeatureExtractor::new(shape, &[(16, true), (32, true), (64, false)], seed),
        reals,
        &fakes,
        &config.pretrain,
        seed ^ 0xfeed,
    )?;
    train_artifact_classifier(&extractor, generations, &real_subset, &config.head, seed ^ 0xbeef)
}

/// Threshold and score tables for layers `1..=max_layer`.
pub fn score_layers(
    model: &GeneratorModel,
    reference: &[LatentCode],
    samples: &[ArtifactSample],
    max_layer: usize,
    tau: f64,
    theta: Option<f32>,
) -> Result<(Vec<ThresholdTable>, LayerTables)> {
    let mut thresholds = Vec::new();
    let mut tables = LayerTables::new();
    for layer in 1..=max_layer {
        let t = compute_thresholds(model, reference, layer, tau)?;
        tables.insert(layer, defective_scores(model, samples, layer, &t, theta)?);
        thresholds.push(t);
    }
    Ok((thresholds, tables))
}

/// How many of `truth` fall in the `k` best-ranked units of `table`.
pub fn recovered(table: &UnitScoreTable, truth: &[usize], k: usize) -> usize {
    table.ranking().into_iter().take(k).filter(|u| truth.contains(u)).count()
}
