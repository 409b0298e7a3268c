//! `unitsurgeon` command line. Every subcommand reads and writes files under
//! the data root and prints one JSON summary line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::correct::{correct, CorrectionConfig, CorrectionMode, LayerTables, UnitBudget};
use crate::data::shapes_dataset;
use crate::error::{ensure, Error, Result};
use crate::explain::{gradcam_mask, ArtifactClass, ClassifierConfig, FeatureExtractor, PretrainConfig};
use crate::genmodel::{
    plant_artifact_units, train_toy_pair, GeneratorModel, LatentCode, PlantSpec, TrainConfig, UnitId,
};
use crate::identify::{
    compute_thresholds, defective_scores, dvalue_stats, fid_rank_units, representative_image, ArtifactSample,
    DEFAULT_TAU, DEFAULT_THETA,
};
use crate::imageio::{gray_png, png_to_image, rgb_png};
use crate::mask::ExplanationMask;
use crate::metrics::{evaluate, render_sweep_plot, sweep_report, Embedder, GaussianSummary};
use crate::tensor::Tensor3;

use super::labels::{Label, LabelRecord, LabelStore};
use super::manifest::{config_hash, derive_seed, sha256_hex, RunManifest, StepRecord};
use super::pipeline::{classifier_from_generations, ClassifierPipelineConfig};
use super::workspace::{
    corrected_id, generated_id, load_images, save_images, tables_hash, PlantRecord, Provenance, SampleSet, Workspace,
};

/// Default layer for GradCAM masks in the classifier's extractor.
pub const CAM_LAYER: usize = 2;
/// Seeds for threshold reference latents start here.
pub const REFERENCE_FIRST_SEED: u64 = 500_000;
const DEFAULT_RUN_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "unitsurgeon", version, about = "Find and attenuate artifact units of a toy generator")]
pub struct Cli {
    /// Workspace root (defaults to $UNITSURGEON_DATA, then ./unitsurgeon-data).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Top-level run seed, fixed by the first command that creates the manifest.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Train the toy generator and discriminator.
    TrainPair {
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Plant gated artifact units into the trained generator.
    Plant(PlantArgs),
    /// Draw latents from the planted generator and auto-label them with the oracle.
    Sample {
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Rater id for the oracle labels.
        #[arg(long, default_value = "oracle")]
        rater: String,
        /// Write samples without labelling them.
        #[arg(long)]
        no_labels: bool,
    },
    /// Train the artifact/normal/real classifier from the label store.
    TrainClassifier {
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 300)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 400)]
        epochs: usize,
    },
    /// GradCAM masks for the artifact set (or the given seeds).
    Explain {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = CAM_LAYER)]
        layer: usize,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f32,
    },
    /// Per-unit activation thresholds on reference latents.
    Thresholds {
        /// Layers to process (defaults to every hidden layer).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 200)]
        reference: usize,
    },
    /// Defective scores for the artifact set.
    ScoreDs {
        #[arg(long, value_enum, default_value_t = MaskSource::Oracle)]
        masks: MaskSource,
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: f32,
        /// Use at most this many artifact latents.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Rank units by the FID of their most activating generations.
    ScoreFid {
        #[arg(long, default_value_t = 2)]
        layer: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Most activating generations of one unit.
    Represent {
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        unit: usize,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Correct generations and write PNGs with provenance sidecars.
    Correct(CorrectArgs),
    /// FID and realism between two image sets.
    Evaluate {
        /// reals | artifact | normal | corrected | corrected:<hash> | a directory of PNGs | an image archive.
        #[arg(long)]
        set_a: String,
        #[arg(long)]
        set_b: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// FID over a grid of correction configurations.
    Sweep(SweepArgs),
    /// Discriminator-value histograms for artifact and normal generations.
    Dvalue {
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8787")]
        addr: String,
    },
}

#[derive(Args, Debug)]
pub struct PlantArgs {
    #[arg(long, default_value_t = 2)]
    pub layer: usize,
    /// Number of units drawn at random when `--unit-list` is absent.
    #[arg(long, default_value_t = 8)]
    pub units: usize,
    #[arg(long, value_delimiter = ',')]
    pub unit_list: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub trigger: f64,
    #[arg(long, default_value_t = 4.0)]
    pub radius: f32,
    #[arg(long, default_value_t = 6.0)]
    pub intensity: f32,
    #[arg(long, default_value_t = 6)]
    pub precursors: usize,
}

#[derive(Args, Debug)]
pub struct CorrectArgs {
    /// JSON `{mode, l, n, lambda, table_path}`; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<CorrectionMode>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub n: Option<UnitBudget>,
    #[arg(long)]
    pub lambda: Option<f32>,
    /// Directory holding `ds-{layer}.json` tables.
    #[arg(long)]
    pub table_path: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Sample subset to correct when no seeds are given.
    #[arg(long, value_enum, default_value_t = SampleKind::Artifact)]
    pub set: SampleKind,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "zero,soft")]
    pub modes: Vec<CorrectionMode>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.5,1")]
    pub ns: Vec<UnitBudget>,
    #[arg(long, value_delimiter = ',', default_value = "0.9")]
    pub lambdas: Vec<f32>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskSource {
    Oracle,
    Gradcam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleKind {
    Artifact,
    Normal,
}

/// File form of a correction request.
#[derive(Clone, Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectionFile {
    mode: Option<CorrectionMode>,
    l: Option<usize>,
    n: Option<UnitBudget>,
    lambda: Option<f32>,
    table_path: Option<PathBuf>,
}

struct Ctx {
    ws: Workspace,
    manifest: RunManifest,
}

impl Ctx {
    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.manifest.seed, label)
    }

    fn finish(&mut self, command: &str, seed: u64, config: &Value, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<()> {
        let step = StepRecord {
            command: command.into(),
            seed,
            config_hash: config_hash(config),
            inputs,
            outputs,
        };
        self.manifest.record(self.ws.root(), step)?;
        self.manifest.save(self.ws.root())
    }

    fn latent(&self, model: &GeneratorModel, seed: u64) -> LatentCode {
        LatentCode::from_seed(seed, model.latent_dim())
    }

    /// Artifact / normal seeds from the label store by majority vote.
    fn labelled(&self, kind: SampleKind) -> Result<Vec<u64>> {
        let store = LabelStore::open(&self.ws.path(Workspace::labels_path()))?;
        let p = store.partition();
        let seeds = match kind {
            SampleKind::Artifact => p.artifact,
            SampleKind::Normal => p.normal,
        };
        ensure!(!seeds.is_empty(), Dataset, "label store has no {kind:?} generations");
        Ok(seeds)
    }

    fn embedder(&self) -> Result<Box<dyn Embedder>> {
        if self.ws.has_classifier() {
            Ok(Box::new(self.ws.classifier()?.extractor().clone()))
        } else {
            Ok(Box::new(FeatureExtractor::toy(self.seed("embedder"))))
        }
    }

    /// Stored mask for `seed`, or a fresh GradCAM mask from the classifier.
    fn mask_for(&self, model: &GeneratorModel, seed: u64, theta: f32) -> Result<ExplanationMask> {
        let stored = self.ws.path(Workspace::mask_path(seed));
        if stored.exists() {
            return self.ws.mask(seed);
        }
        let clf = self.ws.classifier()?;
        gradcam_mask(&clf, &model.image(&self.latent(model, seed))?, ArtifactClass::Artifact, CAM_LAYER, theta)
    }
}

fn hidden_layers(model: &GeneratorModel, requested: &[usize]) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok((1..model.output_layer()).collect());
    }
    for l in requested {
        ensure!(*l >= 1 && *l < model.output_layer(), Config, "layer {l} is not a hidden layer");
    }
    Ok(requested.to_vec())
}

fn take<T>(mut v: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(n) = limit {
        v.truncate(n);
    }
    v
}

fn rel_list(paths: &[&Path]) -> Vec<PathBuf> {
    paths.iter().map(|p| p.to_path_buf()).collect()
}

/// Parses `args` (program name first) and runs the command, returning its
/// JSON summary.
pub fn execute<I, T>(args: I) -> Result<Value>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(e.to_string()))?;
    run(cli)
}

/// Entry point for the binary: prints the summary or an error object and
/// returns the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = json!({"ok": false, "error": {"kind": "usage", "message": e.to_string()}});
            eprintln!("{err}");
            return 2;
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", json!({"ok": false, "error": {"kind": e.kind(), "message": e.to_string()}}));
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    let ws = cli.data.clone().map(Workspace::new).unwrap_or_else(Workspace::from_env);
    let manifest = match RunManifest::load(ws.root())? {
        Some(m) => {
            if let Some(s) = cli.seed {
                ensure!(s == m.seed, Config, "workspace was created with seed {}, not {s}", m.seed);
            }
            m
        }
        None => RunManifest::new(cli.seed.unwrap_or(DEFAULT_RUN_SEED)),
    };
    let mut ctx = Ctx { ws, manifest };
    let (name, mut summary) = match cli.command {
        Command::GenData { count } => ("gen-data", gen_data(&mut ctx, count)?),
        Command::TrainPair { steps, batch_size } => ("train-pair", train_pair(&mut ctx, steps, batch_size)?),
        Command::Plant(a) => ("plant", plant(&mut ctx, a)?),
        Command::Sample { count, first_seed, rater, no_labels } => {
            ("sample", sample(&mut ctx, count, first_seed, &rater, no_labels)?)
        }
        Command::TrainClassifier { per_class, pretrain_steps, epochs } => {
            ("train-classifier", train_classifier(&mut ctx, per_class, pretrain_steps, epochs)?)
        }
        Command::Explain { seeds, layer, theta } => ("explain", explain(&mut ctx, seeds, layer, theta)?),
        Command::Thresholds { layers, tau, reference } => ("thresholds", thresholds(&mut ctx, &layers, tau, reference)?),
        Command::ScoreDs { masks, layers, theta, limit } => ("score-ds", score_ds(&mut ctx, masks, &layers, theta, limit)?),
        Command::ScoreFid { layer, k, count } => ("score-fid", score_fid(&mut ctx, layer, k, count)?),
        Command::Represent { layer, unit, m, count } => ("represent", represent(&mut ctx, layer, unit, m, count)?),
        Command::Correct(a) => ("correct", correct_cmd(&mut ctx, a)?),
        Command::Evaluate { set_a, set_b, limit } => ("evaluate", evaluate_cmd(&mut ctx, &set_a, &set_b, limit)?),
        Command::Sweep(a) => ("sweep", sweep(&mut ctx, a)?),
        Command::Dvalue { bins, limit } => ("dvalue", dvalue(&mut ctx, bins, limit)?),
        Command::Serve { addr } => ("serve", serve(ctx.ws.clone(), &addr)?),
    };
    let obj = summary.as_object_mut().expect("summaries are objects");
    obj.insert("command".into(), json!(name));
    obj.insert("ok".into(), json!(true));
    Ok(summary)
}

fn gen_data(ctx: &mut Ctx, count: usize) -> Result<Value> {
    ensure!(count >= 1, Config, "count must be >= 1");
    let seed = ctx.seed("gen-data");
    let out = Workspace::reals_path();
    std::fs::create_dir_all(ctx.ws.path("data"))?;
    save_images(&ctx.ws.path(&out), &shapes_dataset(count, seed))?;
    ctx.finish("gen-data", seed, &json!({"count": count}), vec![], vec![out.clone()])?;
    Ok(json!({"count": count, "output": out}))
}

fn train_pair(ctx: &mut Ctx, steps: usize, batch_size: usize) -> Result<Value> {
    let reals = ctx.ws.reals()?;
    let cfg = TrainConfig {
        steps,
        batch_size,
        ..TrainConfig::default()
    };
    let seed = ctx.seed("train-pair");
    let (g, d, report) = train_toy_pair(&reals, &cfg, seed)?;
    let (gp, dp, rp) = (Workspace::generator_path(), Workspace::discriminator_path(), Workspace::train_report_path());
    ctx.ws.write_archive(&gp, &g.to_archive()?)?;
    ctx.ws.write_archive(&dp, &d.to_archive()?)?;
    ctx.ws.write_json(&rp, &report)?;
    ctx.finish("train-pair", seed, &serde_json::to_value(&cfg)?, vec![Workspace::reals_path()], rel_list(&[&gp, &dp, &rp]))?;
    let last = |v: &[f32]| v.last().copied().unwrap_or(f32::NAN);
    Ok(json!({
        "steps": report.steps,
        "final_discriminator_loss": last(&report.discriminator_loss),
        "final_generator_loss": last(&report.generator_loss),
        "generator_checksum": g.checksum(),
    }))
}

fn plant(ctx: &mut Ctx, a: PlantArgs) -> Result<Value> {
    let base = ctx.ws.generator()?;
    let seed = ctx.seed("plant");
    let units = if a.unit_list.is_empty() {
        PlantSpec::random_units(&base, a.layer, a.units, seed ^ 0x5eed)?.units
    } else {
        a.unit_list.clone()
    };
    let spec = PlantSpec {
        layer: a.layer,
        units,
        trigger_fraction: a.trigger,
        radius: a.radius,
        intensity: a.intensity,
        precursor_units: a.precursors,
        ..PlantSpec::default()
    };
    let planted = plant_artifact_units(&base, &spec, seed)?;
    let record = PlantRecord {
        ground_truth: planted.ground_truth.iter().copied().collect(),
        precursors: planted.precursors.iter().copied().collect(),
        trigger_fraction: spec.trigger_fraction,
    };
    let (mp, rp) = (Workspace::planted_path(), Workspace::plant_record_path());
    ctx.ws.write_archive(&mp, &planted.model.to_archive()?)?;
    ctx.ws.write_json(&rp, &record)?;
    ctx.finish("plant", seed, &serde_json::to_value(&spec)?, vec![Workspace::generator_path()], rel_list(&[&mp, &rp]))?;
    Ok(json!({"layer": spec.layer, "units": spec.units, "precursors": record.precursors.len()}))
}

fn sample(ctx: &mut Ctx, count: usize, first_seed: u64, rater: &str, no_labels: bool) -> Result<Value> {
    ensure!(count >= 1, Config, "count must be >= 1");
    let model = ctx.ws.planted()?;
    let plant = model.plant().expect("checked on load");
    let seeds: Vec<u64> = (first_seed..first_seed + count as u64).collect();
    let triggered: Vec<bool> = seeds.iter().map(|s| plant.is_triggered(&ctx.latent(&model, *s))).collect();
    let set = SampleSet {
        first_seed,
        seeds: seeds.clone(),
        triggered: triggered.clone(),
    };
    let mut outputs = vec![Workspace::samples_path()];
    ctx.ws.write_json(&Workspace::samples_path(), &set)?;
    for s in &seeds {
        let p = Workspace::sample_png_path(*s);
        ctx.ws.write_bytes(&p, &rgb_png(&model.image(&ctx.latent(&model, *s))?)?)?;
        outputs.push(p);
    }
    let mut added = 0;
    if !no_labels {
        let mut store = LabelStore::open(&ctx.ws.path(Workspace::labels_path()))?;
        for (s, t) in seeds.iter().zip(&triggered) {
            let id = generated_id(*s);
            if store.contains(&id, rater) {
                continue;
            }
            let mut r = LabelRecord::new(id, *s, if *t { Label::Artifact } else { Label::Normal }, rater);
            r.timestamp = 0;
            if *t {
                r.tags = vec!["blob".into()];
            }
            store.append(r)?;
            added += 1;
        }
        outputs.push(Workspace::labels_path());
    }
    let cfg = json!({"count": count, "first_seed": first_seed, "rater": rater, "labels": !no_labels});
    ctx.finish("sample", 0, &cfg, vec![Workspace::planted_path()], outputs)?;
    Ok(json!({
        "count": count,
        "artifact": set.artifact_seeds().len(),
        "normal": set.normal_seeds().len(),
        "labels_added": added,
    }))
}

fn train_classifier(ctx: &mut Ctx, per_class: usize, pretrain_steps: usize, epochs: usize) -> Result<Value> {
    let model = ctx.ws.planted()?;
    let reals = ctx.ws.reals()?;
    let art = take(ctx.labelled(SampleKind::Artifact)?, Some(per_class));
    let norm = take(ctx.labelled(SampleKind::Normal)?, Some(per_class));
    let mut generations = Vec::with_capacity(art.len() + norm.len());
    for (seeds, class) in [(&art, ArtifactClass::Artifact), (&norm, ArtifactClass::Normal)] {
        for s in seeds {
            generations.push((model.image(&ctx.latent(&model, *s))?, class));
        }
    }
    let cfg = ClassifierPipelineConfig {
        pretrain: PretrainConfig {
            steps: pretrain_steps,
            ..PretrainConfig::default()
        },
        head: ClassifierConfig {
            epochs,
            ..ClassifierConfig::default()
        },
        per_class,
        ..ClassifierPipelineConfig::default()
    };
    let seed = ctx.seed("train-classifier");
    let (clf, report) = classifier_from_generations(&generations, &reals, &cfg, seed)?;
    let (cp, rp) = (Workspace::classifier_path(), Workspace::classifier_report_path());
    ctx.ws.write_archive(&cp, &clf.to_archive()?)?;
    ctx.ws.write_json(&rp, &report)?;
    let inputs = vec![Workspace::planted_path(), Workspace::reals_path(), Workspace::labels_path()];
    ctx.finish("train-classifier", seed, &serde_json::to_value(&cfg)?, inputs, rel_list(&[&cp, &rp]))?;
    Ok(json!({
        "holdout_accuracy": report.holdout_accuracy,
        "artifact_vs_normal_accuracy": report.artifact_vs_normal_accuracy,
        "train_size": report.train_size,
    }))
}

fn explain(ctx: &mut Ctx, seeds: Vec<u64>, layer: usize, theta: f32) -> Result<Value> {
    let model = ctx.ws.planted()?;
    let clf = ctx.ws.classifier()?;
    let seeds = if seeds.is_empty() { ctx.labelled(SampleKind::Artifact)? } else { seeds };
    let mut outputs = Vec::new();
    let mut covered = 0.0;
    for s in &seeds {
        let m = gradcam_mask(&clf, &model.image(&ctx.latent(&model, *s))?, ArtifactClass::Artifact, layer, theta)?;
        covered += m.binary.as_ref().map_or(0, |b| b.count()) as f64 / m.values.len() as f64;
        let (jp, pp) = (Workspace::mask_path(*s), Workspace::mask_png_path(*s));
        ctx.ws.write_json(&jp, &m)?;
        ctx.ws.write_bytes(&pp, &gray_png(&m.values, m.width, m.height)?)?;
        outputs.extend([jp, pp]);
    }
    let cfg = json!({"layer": layer, "theta": theta, "seeds": seeds});
    ctx.finish("explain", 0, &cfg, vec![Workspace::planted_path(), Workspace::classifier_path()], outputs)?;
    Ok(json!({"masks": seeds.len(), "mean_coverage": covered / seeds.len() as f64}))
}

fn reference_latents(model: &GeneratorModel, count: usize) -> Vec<LatentCode> {
    (0..count as u64)
        .map(|i| LatentCode::from_seed(REFERENCE_FIRST_SEED + i, model.latent_dim()))
        .collect()
}

fn thresholds(ctx: &mut Ctx, layers: &[usize], tau: f64, reference: usize) -> Result<Value> {
    ensure!(reference >= 1, Config, "need at least one reference latent");
    let model = ctx.ws.planted()?;
    let layers = hidden_layers(&model, layers)?;
    let refs = reference_latents(&model, reference);
    let mut outputs = Vec::new();
    for l in &layers {
        let t = compute_thresholds(&model, &refs, *l, tau)?;
        let p = Workspace::thresholds_path(*l);
        ctx.ws.write_json(&p, &t)?;
        outputs.push(p);
    }
    let cfg = json!({"layers": layers, "tau": tau, "reference": reference});
    ctx.finish("thresholds", 0, &cfg, vec![Workspace::planted_path()], outputs)?;
    Ok(json!({"layers": layers, "tau": tau, "reference": reference}))
}

fn score_ds(ctx: &mut Ctx, source: MaskSource, layers: &[usize], theta: f32, limit: Option<usize>) -> Result<Value> {
    let model = ctx.ws.planted()?;
    let layers = hidden_layers(&model, layers)?;
    let seeds = take(ctx.labelled(SampleKind::Artifact)?, limit);
    let mut inputs = vec![Workspace::planted_path(), Workspace::labels_path()];
    let samples: Vec<ArtifactSample> = match source {
        MaskSource::Oracle => {
            let oracle = crate::genmodel::MaskOracle::new(model.plant().expect("planted").clone());
            seeds
                .iter()
                .map(|s| {
                    let z = ctx.latent(&model, *s);
                    ArtifactSample { mask: oracle.mask(&z), latent: z }
                })
                .collect()
        }
        MaskSource::Gradcam => {
            inputs.push(Workspace::classifier_path());
            seeds
                .iter()
                .map(|s| {
                    let m = ctx.mask_for(&model, *s, theta)?;
                    let mask = match (&m.binary, m.threshold) {
                        (Some(b), Some(t)) if t == theta => b.clone(),
                        _ => m.binarize(theta),
                    };
                    Ok(ArtifactSample { latent: ctx.latent(&model, *s), mask })
                })
                .collect::<Result<_>>()?
        }
    };
    let theta_used = (source == MaskSource::Gradcam).then_some(theta);
    let mut outputs = Vec::new();
    let mut top = serde_json::Map::new();
    for l in &layers {
        let t = ctx.ws.thresholds(*l)?;
        inputs.push(Workspace::thresholds_path(*l));
        let table = defective_scores(&model, &samples, *l, &t, theta_used)?;
        let p = Workspace::ds_path(*l);
        table.write(&ctx.ws.path(&p))?;
        outputs.push(p);
        top.insert(l.to_string(), json!(table.ranking().into_iter().take(8).collect::<Vec<_>>()));
    }
    let cfg = json!({"masks": format!("{source:?}").to_lowercase(), "layers": layers, "theta": theta_used, "seeds": seeds.len()});
    ctx.finish("score-ds", 0, &cfg, inputs, outputs)?;
    Ok(json!({"artifact_count": seeds.len(), "masks": cfg["masks"], "top_units": top}))
}

fn real_summary(ctx: &Ctx, embedder: &dyn Embedder, limit: Option<usize>) -> Result<GaussianSummary> {
    let reals = take(ctx.ws.reals()?, limit);
    let emb = reals.iter().map(|i| embedder.embed_image(i)).collect::<Result<Vec<_>>>()?;
    GaussianSummary::from_embeddings(&emb)
}

fn score_fid(ctx: &mut Ctx, layer: usize, k: usize, count: usize) -> Result<Value> {
    let model = ctx.ws.planted()?;
    let emb = ctx.embedder()?;
    let reals = real_summary(ctx, emb.as_ref(), Some(1000))?;
    let zs: Vec<LatentCode> = (0..count as u64).map(|s| ctx.latent(&model, 3_000_000 + s)).collect();
    let table = fid_rank_units(&model, &zs, &reals, emb.as_ref(), layer, k)?;
    let p = Workspace::fid_rank_path(layer);
    ctx.ws.write_json(&p, &table)?;
    let cfg = json!({"layer": layer, "k": k, "count": count, "embedder": emb.embedder_id()});
    ctx.finish("score-fid", 0, &cfg, vec![Workspace::planted_path(), Workspace::reals_path()], vec![p])?;
    Ok(json!({"layer": layer, "top_units": table.ranking().into_iter().take(8).collect::<Vec<_>>()}))
}

fn represent(ctx: &mut Ctx, layer: usize, unit: usize, m: usize, count: usize) -> Result<Value> {
    let model = ctx.ws.planted()?;
    let zs: Vec<LatentCode> = (0..count as u64).map(|s| ctx.latent(&model, 3_000_000 + s)).collect();
    let id = UnitId::new(layer, unit);
    let r = representative_image(&model, &zs, id, m)?;
    let (pp, jp) = (Workspace::represent_path(id, "png"), Workspace::represent_path(id, "json"));
    ctx.ws.write_bytes(&pp, &rgb_png(&r.render(4))?)?;
    ctx.ws.write_json(&jp, &r)?;
    let cfg = json!({"layer": layer, "unit": unit, "m": m, "count": count});
    ctx.finish("represent", 0, &cfg, vec![Workspace::planted_path()], rel_list(&[&pp, &jp]))?;
    Ok(json!({"unit": id.to_string(), "magnitudes": r.magnitudes}))
}

fn load_tables(ws: &Workspace, dir: Option<&Path>) -> Result<LayerTables> {
    match dir {
        None => ws.score_tables(),
        Some(d) => super::workspace::score_tables_in(d),
    }
}

fn correct_cmd(ctx: &mut Ctx, a: CorrectArgs) -> Result<Value> {
    let file: CorrectionFile = match &a.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => CorrectionFile::default(),
    };
    let d = CorrectionConfig::default();
    let config = CorrectionConfig {
        mode: a.mode.or(file.mode).unwrap_or(d.mode),
        l: a.l.or(file.l).unwrap_or(d.l),
        n: a.n.or(file.n).unwrap_or(d.n),
        lambda: a.lambda.or(file.lambda).unwrap_or(d.lambda),
    };
    let model = ctx.ws.planted()?;
    config.validate(&model)?;
    let table_dir = a.table_path.or(file.table_path);
    let tables = load_tables(&ctx.ws, table_dir.as_deref())?;
    for l in 1..=config.l {
        ensure!(tables.contains_key(&l), NotFound, "no score table for layer {l}; run score-ds first");
    }
    let seeds = if a.seeds.is_empty() { take(ctx.labelled(a.set)?, a.limit) } else { a.seeds.clone() };
    let chash = config_hash(&config);
    let thash = tables_hash(&tables, config.l);
    let mut outputs = Vec::new();
    let mut hashes = Vec::new();
    for s in &seeds {
        let z = ctx.latent(&model, *s);
        let mask = match config.mode {
            CorrectionMode::Local => Some(ctx.mask_for(&model, *s, DEFAULT_THETA)?),
            _ => None,
        };
        let png = rgb_png(&correct(&model, &z, &tables, &config, mask.as_ref())?)?;
        let image_sha256 = sha256_hex(&png);
        let prov = Provenance {
            image_id: corrected_id(*s, &chash),
            latent_seed: *s,
            config: config.clone(),
            config_hash: chash.clone(),
            table_hash: thash.clone(),
            image_sha256: image_sha256.clone(),
        };
        let (pp, jp) = (Workspace::corrected_path(*s, &chash, "png"), Workspace::corrected_path(*s, &chash, "json"));
        ctx.ws.write_bytes(&pp, &png)?;
        ctx.ws.write_json(&jp, &prov)?;
        outputs.extend([pp, jp]);
        hashes.push(image_sha256);
    }
    ctx.ws.write_bytes(&Workspace::latest_corrected_path(), chash.as_bytes())?;
    outputs.push(Workspace::latest_corrected_path());
    let cfg = json!({"config": config, "table_hash": thash, "seeds": seeds});
    ctx.finish("correct", 0, &cfg, vec![Workspace::planted_path()], outputs)?;
    Ok(json!({
        "count": seeds.len(),
        "config": config,
        "config_hash": chash,
        "table_hash": thash,
        "output_dir": Workspace::corrected_dir(&chash),
        "image_sha256": hashes,
    }))
}

fn png_dir(dir: &Path) -> Result<Vec<Tensor3>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "png"));
    files.sort();
    ensure!(!files.is_empty(), NotFound, "no PNG files in {}", dir.display());
    files.iter().map(|p| png_to_image(&std::fs::read(p)?)).collect()
}

/// Resolves an image-set name to images and the files it was read from.
fn image_set(ctx: &Ctx, name: &str) -> Result<(Vec<Tensor3>, PathBuf)> {
    let generated = |kind: SampleKind| -> Result<(Vec<Tensor3>, PathBuf)> {
        let model = ctx.ws.planted()?;
        let imgs = ctx
            .labelled(kind)?
            .iter()
            .map(|s| model.image(&ctx.latent(&model, *s)))
            .collect::<Result<_>>()?;
        Ok((imgs, Workspace::labels_path()))
    };
    match name {
        "reals" => Ok((ctx.ws.reals()?, Workspace::reals_path())),
        "artifact" => generated(SampleKind::Artifact),
        "normal" => generated(SampleKind::Normal),
        "corrected" => {
            let p = ctx.ws.path(Workspace::latest_corrected_path());
            ensure!(p.exists(), NotFound, "no corrected set yet; run correct first");
            let hash = std::fs::read_to_string(p)?;
            let dir = Workspace::corrected_dir(hash.trim());
            Ok((png_dir(&ctx.ws.path(&dir))?, dir))
        }
        other => {
            if let Some(hash) = other.strip_prefix("corrected:") {
                let dir = Workspace::corrected_dir(hash);
                return Ok((png_dir(&ctx.ws.path(&dir))?, dir));
            }
            let p = PathBuf::from(other);
            if p.is_dir() {
                Ok((png_dir(&p)?, p))
            } else if p.is_file() {
                Ok((load_images(&p)?, p))
            } else {
                Err(Error::NotFound(format!("image set {other}")))
            }
        }
    }
}

fn evaluate_cmd(ctx: &mut Ctx, a: &str, b: &str, limit: Option<usize>) -> Result<Value> {
    let (ia, pa) = image_set(ctx, a)?;
    let (ib, pb) = image_set(ctx, b)?;
    let emb = ctx.embedder()?;
    let ea = take(ia, limit).iter().map(|i| emb.embed_image(i)).collect::<Result<Vec<_>>>()?;
    let eb = take(ib, limit).iter().map(|i| emb.embed_image(i)).collect::<Result<Vec<_>>>()?;
    let report = evaluate(&ea, &eb, &emb.embedder_id())?;
    let out = Workspace::report_path("eval.json");
    ctx.ws.write_json(&out, &report)?;
    let cfg = json!({"set_a": a, "set_b": b, "limit": limit});
    ctx.finish("evaluate", 0, &cfg, vec![pa, pb], vec![out])?;
    Ok(json!({
        "set_a": a,
        "set_b": b,
        "fid": report.fid,
        "mean_realism": report.mean_realism,
        "size_a": report.size_a,
        "size_b": report.size_b,
        "embedder_id": report.embedder_id,
    }))
}

fn sweep(ctx: &mut Ctx, a: SweepArgs) -> Result<Value> {
    let model = ctx.ws.planted()?;
    let tables = ctx.ws.score_tables()?;
    let mut grid = Vec::new();
    for mode in &a.modes {
        for l in &a.layers {
            for n in &a.ns {
                for lambda in &a.lambdas {
                    let c = CorrectionConfig {
                        mode: *mode,
                        l: *l,
                        n: *n,
                        lambda: *lambda,
                    };
                    c.validate(&model)?;
                    grid.push(c);
                }
            }
        }
    }
    let seeds = take(ctx.labelled(SampleKind::Artifact)?, a.limit);
    let zs: Vec<LatentCode> = seeds.iter().map(|s| ctx.latent(&model, *s)).collect();
    let masks = if a.modes.contains(&CorrectionMode::Local) {
        Some(seeds.iter().map(|s| ctx.mask_for(&model, *s, DEFAULT_THETA)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let emb = ctx.embedder()?;
    let reals = take(ctx.ws.reals()?, Some(1000));
    let real_emb = reals.iter().map(|i| emb.embed_image(i)).collect::<Result<Vec<_>>>()?;
    let report = sweep_report(&model, &zs, &tables, &grid, masks.as_deref(), &real_emb, emb.as_ref())?;
    let (cp, pp, jp) = (
        Workspace::report_path("sweep.csv"),
        Workspace::report_path("sweep.png"),
        Workspace::report_path("sweep.json"),
    );
    ctx.ws.write_bytes(&cp, report.to_csv()?.as_bytes())?;
    ctx.ws.write_bytes(&pp, &rgb_png(&render_sweep_plot(&report))?)?;
    ctx.ws.write_json(&jp, &report)?;
    let cfg = json!({"grid": grid, "seeds": seeds.len()});
    ctx.finish("sweep", 0, &cfg, vec![Workspace::planted_path(), Workspace::reals_path()], rel_list(&[&cp, &pp, &jp]))?;
    Ok(json!({"points": report.rows.len(), "uncorrected_fid": report.uncorrected_fid, "csv": cp}))
}

fn dvalue(ctx: &mut Ctx, bins: usize, limit: Option<usize>) -> Result<Value> {
    let model = ctx.ws.planted()?;
    let disc = ctx.ws.discriminator()?;
    let imgs = |kind| -> Result<Vec<Tensor3>> {
        take(ctx.labelled(kind)?, limit).iter().map(|s| model.image(&ctx.latent(&model, *s))).collect()
    };
    let stats = dvalue_stats(&disc, &imgs(SampleKind::Normal)?, &imgs(SampleKind::Artifact)?, bins)?;
    let out = Workspace::report_path("dvalue.json");
    ctx.ws.write_json(&out, &stats)?;
    let inputs = vec![Workspace::planted_path(), Workspace::discriminator_path(), Workspace::labels_path()];
    ctx.finish("dvalue", 0, &json!({"bins": bins, "limit": limit}), inputs, vec![out])?;
    Ok(json!({
        "overlap": stats.overlap,
        "normal_mean": stats.normal_mean,
        "artifact_mean": stats.artifact_mean,
    }))
}

fn serve(ws: Workspace, addr: &str) -> Result<Value> {
    let state = super::service::AppState::load(ws)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(super::service::serve(std::sync::Arc::new(state), addr))?;
    Ok(json!({"addr": addr}))
}
