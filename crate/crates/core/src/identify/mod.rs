//! Unit scoring: quantile thresholds, IoU against defect masks, defective
//! scores, the FID-based baseline ranking, representative images and
//! D-value statistics.

mod dvalue;
mod represent;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::explain::{gradcam_mask, ArtifactClass, ClassifierModel};
use crate::genmodel::{GeneratorModel, LatentCode, MaskOracle};
use crate::mask::BinaryMask;
use crate::metrics::{fid_from_summaries, Embedder, GaussianSummary};
use crate::tensor::Tensor3;

pub use crate::genmodel::UnitId;
pub use dvalue::{dvalue_stats, overlap_coefficient, DValueStats, Histogram};
pub use represent::{representative_image, RepresentativeImage};

pub const DEFAULT_TAU: f64 = 0.005;
pub const DEFAULT_THETA: f32 = 0.5;

/// Largest `k` with `k / n ≤ τ`.
fn exceed_count(n: usize, tau: f64) -> usize {
    let mut k = (tau * n as f64).floor() as usize;
    while k > 0 && k as f64 / n as f64 > tau {
        k -= 1;
    }
    while (k + 1) as f64 / n as f64 <= tau {
        k += 1;
    }
    k.min(n - 1)
}

/// The `(k+1)`-th largest value, `k = ⌊τN⌋`: at most a fraction τ of the
/// values lies strictly above it.
pub fn quantile_threshold(values: &[f32], tau: f64) -> Result<f32> {
    ensure!(!values.is_empty(), InvalidInput, "reference distribution is empty");
    ensure!(tau > 0.0 && tau < 1.0, Config, "tau must lie in (0, 1), got {tau}");
    let k = exceed_count(values.len(), tau);
    let mut v = values.to_vec();
    let (_, nth, _) = v.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    Ok(*nth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub layer: usize,
    pub tau: f64,
    pub reference_id: String,
    pub reference_count: usize,
    pub thresholds: Vec<f32>,
}

fn latent_set_id(latents: &[LatentCode]) -> String {
    let mut h = Sha256::new();
    for z in latents {
        for v in z.values() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Per-unit thresholds from a batch of layer activations.
pub fn thresholds_from_activations(acts: &[Tensor3], tau: f64) -> Result<Vec<f32>> {
    ensure!(!acts.is_empty(), InvalidInput, "reference set is empty");
    let shape = acts[0].shape();
    ensure!(
        acts.iter().all(|a| a.shape() == shape),
        InvalidInput,
        "reference activations differ in shape"
    );
    (0..shape[0])
        .map(|u| {
            let pooled: Vec<f32> = acts.iter().flat_map(|a| a.channel(u).iter().copied()).collect();
            quantile_threshold(&pooled, tau)
        })
        .collect()
}

/// Thresholds over each unit's values pooled across all reference
/// generations and positions.
pub fn compute_thresholds(
    model: &GeneratorModel,
    reference: &[LatentCode],
    layer: usize,
    tau: f64,
) -> Result<ThresholdTable> {
    ensure!(!reference.is_empty(), InvalidInput, "reference set is empty");
    ensure!(layer < model.num_layers(), InvalidInput, "unknown layer {layer}");
    let acts = reference
        .iter()
        .map(|z| model.layer_activation(z, layer))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdTable {
        layer,
        tau,
        reference_id: latent_set_id(reference),
        reference_count: reference.len(),
        thresholds: thresholds_from_activations(&acts, tau)?,
    })
}

/// IoU between `activation > T` (upsampled to the mask's resolution) and the
/// mask.
pub fn unit_iou(activation: &[f32], height: usize, width: usize, threshold: f32, mask: &BinaryMask) -> Result<f64> {
    ensure!(
        activation.len() == height * width,
        InvalidInput,
        "activation has {} values for {height}x{width}",
        activation.len()
    );
    BinaryMask::above(activation, height, width, threshold)
        .resample(mask.height, mask.width)
        .iou(mask)
}

/// One artifact generation with its defect mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactSample {
    pub latent: LatentCode,
    pub mask: BinaryMask,
}

/// Masks from the planted-blob oracle.
pub fn oracle_samples(oracle: &MaskOracle, latents: &[LatentCode]) -> Vec<ArtifactSample> {
    latents
        .iter()
        .map(|z| ArtifactSample {
            latent: z.clone(),
            mask: oracle.mask(z),
        })
        .collect()
}

/// Binarized GradCAM masks for the artifact class.
pub fn gradcam_samples(
    model: &GeneratorModel,
    classifier: &ClassifierModel,
    latents: &[LatentCode],
    cam_layer: usize,
    theta: f32,
) -> Result<Vec<ArtifactSample>> {
    latents
        .iter()
        .map(|z| {
            let img = model.image(z)?;
            let m = gradcam_mask(classifier, &img, ArtifactClass::Artifact, cam_layer, theta)?;
            Ok(ArtifactSample {
                latent: z.clone(),
                mask: m.binary.expect("threshold given"),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub unit: usize,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitScoreTable {
    pub layer: usize,
    pub units: Vec<UnitScore>,
    pub artifact_set: String,
    pub artifact_count: usize,
    pub tau: f64,
    pub theta: Option<f32>,
}

/// Per-layer min-max scaling; a layer whose scores are all equal maps to 0.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .map(|v| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// Indices sorted by score descending, ties to the lower index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    idx
}

impl UnitScoreTable {
    pub fn from_raw(layer: usize, raw: Vec<f64>, artifact_set: String, artifact_count: usize, tau: f64, theta: Option<f32>) -> Self {
        let norm = min_max_normalize(&raw);
        Self {
            layer,
            units: raw
                .into_iter()
                .zip(norm)
                .enumerate()
                .map(|(unit, (raw, normalized))| UnitScore { unit, raw, normalized })
                .collect(),
            artifact_set,
            artifact_count,
            tau,
            theta,
        }
    }

    pub fn raw(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.raw).collect()
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.normalized).collect()
    }

    /// Units by raw score descending, ties to the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_descending(&self.raw())
    }

    pub fn sorted(&self) -> Vec<UnitScore> {
        self.ranking().into_iter().map(|i| self.units[i].clone()).collect()
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn artifact_set_id(samples: &[ArtifactSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for v in s.latent.values() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(s.mask.bits.iter().map(|b| *b as u8).collect::<Vec<_>>());
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Raw scores from precomputed layer activations: mean IoU per unit over the
/// samples.
pub fn defective_scores_from_activations(
    acts: &[Tensor3],
    masks: &[BinaryMask],
    thresholds: &[f32],
) -> Result<Vec<f64>> {
    ensure!(!acts.is_empty(), InvalidInput, "artifact set is empty");
    ensure!(acts.len() == masks.len(), InvalidInput, "activations and masks differ in count");
    let [units, h, w] = acts[0].shape();
    ensure!(
        thresholds.len() == units,
        InvalidInput,
        "threshold table has {} units, layer has {units}",
        thresholds.len()
    );
    let mut sums = vec![0.0f64; units];
    for (a, m) in acts.iter().zip(masks) {
        ensure!(a.shape() == [units, h, w], InvalidInput, "activation shapes differ");
        for (u, s) in sums.iter_mut().enumerate() {
            *s += unit_iou(a.channel(u), h, w, thresholds[u], m)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / acts.len() as f64).collect())
}

pub fn defective_scores(
    model: &GeneratorModel,
    samples: &[ArtifactSample],
    layer: usize,
    thresholds: &ThresholdTable,
    theta: Option<f32>,
) -> Result<UnitScoreTable> {
    ensure!(!samples.is_empty(), InvalidInput, "artifact set is empty");
    if thresholds.layer != layer {
        return Err(Error::InvalidInput(format!(
            "threshold table is for layer {}, not {layer}",
            thresholds.layer
        )));
    }
    let acts = samples
        .iter()
        .map(|s| model.layer_activation(&s.latent, layer))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let raw = defective_scores_from_activations(&acts, &masks, &thresholds.thresholds)?;
    Ok(UnitScoreTable::from_raw(
        layer,
        raw,
        artifact_set_id(samples),
        samples.len(),
        thresholds.tau,
        theta,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidRankTable {
    pub layer: usize,
    pub k: usize,
    pub n: usize,
    pub fids: Vec<f64>,
    pub embedder_id: String,
}

impl FidRankTable {
    pub fn ranking(&self) -> Vec<usize> {
        rank_descending(&self.fids)
    }
}

/// Indices of the `k` largest magnitudes, ties to the lower index.
pub(crate) fn top_k_indices(magnitudes: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..magnitudes.len()).collect();
    idx.sort_by(|a, b| magnitudes[*b].total_cmp(&magnitudes[*a]).then(a.cmp(b)));
    idx.truncate(k);
    idx
}

pub(crate) fn spatial_mean(plane: &[f32]) -> f32 {
    (plane.iter().map(|v| *v as f64).sum::<f64>() / plane.len() as f64) as f32
}

/// Per unit, FID between the embeddings of its `k` most activating
/// generations and the real reference summary.
pub fn fid_rank_units(
    model: &GeneratorModel,
    latents: &[LatentCode],
    reals: &GaussianSummary,
    embedder: &dyn Embedder,
    layer: usize,
    k: usize,
) -> Result<FidRankTable> {
    ensure!(k >= 2, Config, "k must be at least 2");
    ensure!(k <= latents.len(), Config, "k = {k} exceeds the {} latents", latents.len());
    ensure!(layer < model.output_layer(), InvalidInput, "layer {layer} is not a hidden layer");
    let units = model.layer(layer).expect("checked").units;
    let mut magnitude = vec![Vec::with_capacity(latents.len()); units];
    let mut embeddings = Vec::with_capacity(latents.len());
    for z in latents {
        let (img, stack) = model.generate(z, true)?;
        let act = stack.expect("recorded").layer(layer).expect("layer exists").clone();
        for (u, m) in magnitude.iter_mut().enumerate() {
            m.push(spatial_mean(act.channel(u)));
        }
        embeddings.push(embedder.embed_image(&img)?);
    }
    let fids = magnitude
        .iter()
        .map(|m| {
            let set: Vec<Vec<f32>> = top_k_indices(m, k).into_iter().map(|i| embeddings[i].clone()).collect();
            fid_from_summaries(&GaussianSummary::from_embeddings(&set)?, reals)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FidRankTable {
        layer,
        k,
        n: latents.len(),
        fids,
        embedder_id: embedder.embedder_id(),
    })
}
