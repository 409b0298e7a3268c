//! Three-way artifact / normal / real classifier over a frozen conv feature
//! extractor, and GradCAM explanation masks for its decisions.

mod gradcam;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::error::{ensure, Error, Result};
use crate::nn::{init_normal, shuffled_indices, Adam, ConvGrads, ConvStack};
use crate::tensor::{sigmoid, softplus, Tensor3};

pub use crate::mask::{BinaryMask, ExplanationMask};
pub use gradcam::{gradcam, gradcam_mask, GradCam};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactClass {
    Artifact = 0,
    Normal = 1,
    Real = 2,
}

impl ArtifactClass {
    pub const ALL: [ArtifactClass; 3] = [ArtifactClass::Artifact, ArtifactClass::Normal, ArtifactClass::Real];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl std::str::FromStr for ArtifactClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "artifact" => Ok(Self::Artifact),
            "normal" => Ok(Self::Normal),
            "real" => Ok(Self::Real),
            other => Err(Error::InvalidInput(format!("unknown class {other}"))),
        }
    }
}

/// Conv stack followed by global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    stack: ConvStack,
}

impl FeatureExtractor {
    pub fn new(image_shape: [usize; 3], layout: &[(usize, bool)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            stack: ConvStack::new(&mut rng, image_shape, layout),
        }
    }

    /// Default toy layout: 16@32² → pool → 32@16² → pool → 64@8², giving a
    /// 64-dimensional embedding.
    pub fn toy(seed: u64) -> Self {
        Self::new([3, 32, 32], &[(16, true), (32, true), (64, false)], seed)
    }

    pub fn from_stack(stack: ConvStack) -> Self {
        Self { stack }
    }

    pub fn stack(&self) -> &ConvStack {
        &self.stack
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.stack.input_shape
    }

    pub fn dim(&self) -> usize {
        self.stack.output_shape()[0]
    }

    pub fn num_blocks(&self) -> usize {
        self.stack.blocks.len()
    }

    pub(crate) fn check_image(&self, image: &Tensor3) -> Result<()> {
        ensure!(
            image.shape() == self.stack.input_shape,
            InvalidInput,
            "image shape {:?} does not match extractor input {:?}",
            image.shape(),
            self.stack.input_shape
        );
        Ok(())
    }

    pub fn embed(&self, image: &Tensor3) -> Result<Vec<f32>> {
        self.check_image(image)?;
        Ok(global_average(&self.stack.forward(image)))
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.stack.blocks {
            for v in b.weight.iter().chain(&b.bias) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn push_to(&self, a: &mut TensorArchive) -> Result<()> {
        for (i, b) in self.stack.blocks.iter().enumerate() {
            a.push(format!("extractor.block{i}.weight"), &[b.weight.len()], b.weight.clone())?;
            a.push(format!("extractor.block{i}.bias"), &[b.bias.len()], b.bias.clone())?;
        }
        Ok(())
    }

    fn layout_json(&self) -> serde_json::Value {
        serde_json::json!({
            "input_shape": self.stack.input_shape,
            "blocks": self.stack.blocks.iter().map(|b| (b.out_channels, b.pool)).collect::<Vec<_>>(),
        })
    }

    fn read_from(a: &TensorArchive, layout: &serde_json::Value) -> Result<Self> {
        let shape: [usize; 3] = serde_json::from_value(layout["input_shape"].clone())?;
        let blocks: Vec<(usize, bool)> = serde_json::from_value(layout["blocks"].clone())?;
        let mut e = Self::new(shape, &blocks, 0);
        for (i, b) in e.stack.blocks.iter_mut().enumerate() {
            b.weight = a.require(&format!("extractor.block{i}.weight"), &[b.weight.len()])?.to_vec();
            b.bias = a.require(&format!("extractor.block{i}.bias"), &[b.bias.len()])?.to_vec();
        }
        Ok(e)
    }
}

pub(crate) fn global_average(t: &Tensor3) -> Vec<f32> {
    let n = t.plane_len() as f32;
    (0..t.channels()).map(|c| t.channel(c).iter().sum::<f32>() / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

/// Trains `extractor` end to end as a real-vs-generated discriminator with a
/// temporary logistic head; the returned extractor is what gets frozen.
pub fn pretrain_extractor(
    mut extractor: FeatureExtractor,
    reals: &[Tensor3],
    fakes: &[Tensor3],
    config: &PretrainConfig,
    seed: u64,
) -> Result<FeatureExtractor> {
    ensure!(!reals.is_empty() && !fakes.is_empty(), InvalidInput, "need real and generated images");
    ensure!(config.steps >= 1 && config.batch_size >= 1, Config, "steps and batch size must be >= 1");
    for img in reals.iter().chain(fakes) {
        extractor.check_image(img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = extractor.dim();
    let mut head = init_normal(&mut rng, d, (1.0 / d as f32).sqrt());
    let mut head_bias = vec![0.0f32];
    let mut opt = Adam::new(config.lr, 0.9, 0.999);
    let out_shape = extractor.stack.output_shape();
    let plane = (out_shape[1] * out_shape[2]) as f32;
    for _ in 0..config.steps {
        let mut grads = ConvGrads::zeros_like(&extractor.stack);
        let mut gh = vec![0.0f32; d];
        let mut gb = 0.0f32;
        for k in 0..2 * config.batch_size {
            let (img, y) = if k % 2 == 0 {
                (&reals[rng.random_range(0..reals.len())], 1.0f32)
            } else {
                (&fakes[rng.random_range(0..fakes.len())], 0.0f32)
            };
            let tape = extractor.stack.forward_tape(img);
            let feat = global_average(&tape.output);
            let logit = head.iter().zip(&feat).map(|(w, f)| w * f).sum::<f32>() + head_bias[0];
            let g = sigmoid(logit) - y;
            let mut g_out = Tensor3::zeros(out_shape[0], out_shape[1], out_shape[2]);
            for c in 0..d {
                gh[c] += g * feat[c];
                g_out.channel_mut(c).fill(g * head[c] / plane);
            }
            gb += g;
            extractor.stack.backward(&tape, &g_out, Some(&mut grads), None, false);
        }
        let mut all = grads.flatten();
        all.push(gh);
        all.push(vec![gb]);
        let mut params = extractor.stack.params_mut();
        params.push(&mut head);
        params.push(&mut head_bias);
        opt.update(params, &all, 1.0 / (2 * config.batch_size) as f32);
    }
    Ok(extractor)
}

/// Frozen extractor plus a linear softmax head over the three classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    extractor: FeatureExtractor,
    /// Row-major `3 × d`.
    head_weight: Vec<f32>,
    head_bias: [f32; 3],
}

impl ClassifierModel {
    pub fn new(extractor: FeatureExtractor, head_weight: Vec<f32>, head_bias: [f32; 3]) -> Result<Self> {
        ensure!(
            head_weight.len() == 3 * extractor.dim(),
            InvalidInput,
            "head needs 3x{} weights",
            extractor.dim()
        );
        Ok(Self {
            extractor,
            head_weight,
            head_bias,
        })
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn head_weight(&self) -> &[f32] {
        &self.head_weight
    }

    pub fn head_bias(&self) -> [f32; 3] {
        self.head_bias
    }

    pub(crate) fn class_row(&self, class: ArtifactClass) -> &[f32] {
        let d = self.extractor.dim();
        &self.head_weight[class.index() * d..(class.index() + 1) * d]
    }

    pub fn logits_from_features(&self, feat: &[f32]) -> [f32; 3] {
        let mut out = self.head_bias;
        for (c, o) in out.iter_mut().enumerate() {
            let d = feat.len();
            *o += self.head_weight[c * d..(c + 1) * d]
                .iter()
                .zip(feat)
                .map(|(w, f)| w * f)
                .sum::<f32>();
        }
        out
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new(serde_json::json!({
            "kind": "classifier",
            "extractor": self.extractor.layout_json(),
            "classes": ["artifact", "normal", "real"],
        }));
        self.extractor.push_to(&mut a)?;
        a.push("head.weight", &[3, self.extractor.dim()], self.head_weight.clone())?;
        a.push("head.bias", &[3], self.head_bias.to_vec())?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("classifier") {
            return Err(Error::Archive("not a classifier checkpoint".into()));
        }
        let extractor = FeatureExtractor::read_from(a, &a.meta["extractor"])?;
        let d = extractor.dim();
        let w = a.require("head.weight", &[3, d])?.to_vec();
        let b = a.require("head.bias", &[3])?;
        Self::new(extractor, w, [b[0], b[1], b[2]])
    }
}

pub(crate) fn softmax3(logits: [f32; 3]) -> [f32; 3] {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e = logits.map(|l| ((l - m) as f64).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| (v / s) as f32)
}

/// Class probabilities `[artifact, normal, real]`.
pub fn classify(model: &ClassifierModel, image: &Tensor3) -> Result<[f32; 3]> {
    let feat = model.extractor.embed(image)?;
    Ok(softmax3(model.logits_from_features(&feat)))
}

pub fn predict(model: &ClassifierModel, image: &Tensor3) -> Result<ArtifactClass> {
    let p = classify(model, image)?;
    let best = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
    Ok(ArtifactClass::from_index(best).expect("3 classes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub holdout_fraction: f64,
    pub epochs: usize,
    pub lr: f32,
    pub l2: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            epochs: 400,
            lr: 0.05,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_size: usize,
    pub holdout_size: usize,
    pub holdout_accuracy: f64,
    /// Accuracy restricted to held-out artifact and normal generations.
    pub artifact_vs_normal_accuracy: f64,
    pub per_class_accuracy: [f64; 3],
    pub extractor_checksum: String,
}

/// Softmax-regression head fitted by full-batch Adam on standardised
/// features; standardisation is folded back into the returned weights.
fn fit_head(features: &[Vec<f32>], labels: &[ArtifactClass], config: &ClassifierConfig, seed: u64) -> (Vec<f32>, [f32; 3]) {
    let d = features[0].len();
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j] as f64).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = features.iter().map(|f| (f[j] as f64 - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-6)
        })
        .collect();
    let xs: Vec<Vec<f32>> = features
        .iter()
        .map(|f| (0..d).map(|j| ((f[j] as f64 - mean[j]) / std[j]) as f32).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = init_normal(&mut rng, 3 * d, 0.01);
    let mut b = vec![0.0f32; 3];
    let mut opt = Adam::new(config.lr, 0.9, 0.999);
    for _ in 0..config.epochs {
        let mut gw = vec![0.0f32; 3 * d];
        let mut gb = vec![0.0f32; 3];
        for (x, y) in xs.iter().zip(labels) {
            let mut logits = [b[0], b[1], b[2]];
            for c in 0..3 {
                logits[c] += w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f32>();
            }
            let p = softmax3(logits);
            for c in 0..3 {
                let g = p[c] - if c == y.index() { 1.0 } else { 0.0 };
                gb[c] += g;
                for (gwj, xj) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *gwj += g * xj;
                }
            }
        }
        let scale = 1.0 / xs.len() as f32;
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g += config.l2 * wv / scale;
        }
        opt.update(vec![w.as_mut_slice(), b.as_mut_slice()], &[gw, gb], scale);
    }
    // fold standardisation: w'·f + b' == w·((f-μ)/σ) + b
    let mut bias = [b[0], b[1], b[2]];
    for c in 0..3 {
        for j in 0..d {
            let wj = w[c * d + j] as f64 / std[j];
            bias[c] -= (wj * mean[j]) as f32;
            w[c * d + j] = wj as f32;
        }
    }
    (w, bias)
}

/// Stratified, seeded split into (train, holdout) index lists.
fn stratified_split(labels: &[ArtifactClass], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for class in ArtifactClass::ALL {
        let idx: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        let order = shuffled_indices(rng, idx.len());
        let n_hold = ((idx.len() as f64) * fraction).round() as usize;
        let n_hold = if idx.len() >= 2 { n_hold.clamp(1, idx.len() - 1) } else { 0 };
        for (k, o) in order.iter().enumerate() {
            if k < n_hold {
                hold.push(idx[*o]);
            } else {
                train.push(idx[*o]);
            }
        }
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

fn evaluate(model: &ClassifierModel, feats: &[Vec<f32>], labels: &[ArtifactClass], idx: &[usize]) -> (f64, f64, [f64; 3]) {
    let mut correct = [0usize; 3];
    let mut total = [0usize; 3];
    for &i in idx {
        let l = model.logits_from_features(&feats[i]);
        let pred = (0..3).fold(0, |b, k| if l[k] > l[b] { k } else { b });
        total[labels[i].index()] += 1;
        correct[labels[i].index()] += (pred == labels[i].index()) as usize;
    }
    let ratio = |c: usize, t: usize| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    let overall = ratio(correct.iter().sum(), total.iter().sum());
    let av = ratio(correct[0] + correct[1], total[0] + total[1]);
    (overall, av, [0, 1, 2].map(|k| ratio(correct[k], total[k])))
}

/// Fits only the linear head on precomputed features and reports held-out
/// accuracy.
pub fn train_head(
    extractor: &FeatureExtractor,
    features: &[Vec<f32>],
    labels: &[ArtifactClass],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(ClassifierModel, ClassifierReport)> {
    ensure!(features.len() == labels.len(), InvalidInput, "features and labels differ in length");
    let gen_classes = [ArtifactClass::Artifact, ArtifactClass::Normal]
        .iter()
        .filter(|c| labels.contains(c))
        .count();
    if gen_classes < 2 {
        return Err(Error::Dataset(
            "generations must include both artifact and normal labels".into(),
        ));
    }
    ensure!(labels.contains(&ArtifactClass::Real), Dataset, "real sample set is empty");
    ensure!(
        features.iter().all(|f| f.len() == extractor.dim()),
        InvalidInput,
        "feature dimension must be {}",
        extractor.dim()
    );
    ensure!(
        (0.0..1.0).contains(&config.holdout_fraction) && config.epochs >= 1,
        Config,
        "holdout fraction must lie in [0, 1) and epochs >= 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, hold) = stratified_split(labels, config.holdout_fraction, &mut rng);
    let tf: Vec<Vec<f32>> = train.iter().map(|i| features[*i].clone()).collect();
    let tl: Vec<ArtifactClass> = train.iter().map(|i| labels[*i]).collect();
    let (w, b) = fit_head(&tf, &tl, config, rng.random());
    let model = ClassifierModel::new(extractor.clone(), w, b)?;
    let eval_idx = if hold.is_empty() { &train } else { &hold };
    let (acc, av, per) = evaluate(&model, features, labels, eval_idx);
    let report = ClassifierReport {
        train_size: train.len(),
        holdout_size: hold.len(),
        holdout_accuracy: acc,
        artifact_vs_normal_accuracy: av,
        per_class_accuracy: per,
        extractor_checksum: extractor.checksum(),
    };
    Ok((model, report))
}

/// Trains the three-way head over a frozen extractor.
///
/// `generations` carry artifact/normal labels; every image in `reals` is
/// labelled real. The extractor is never modified.
pub fn train_artifact_classifier(
    extractor: &FeatureExtractor,
    generations: &[(Tensor3, ArtifactClass)],
    reals: &[Tensor3],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(ClassifierModel, ClassifierReport)> {
    ensure!(!reals.is_empty(), Dataset, "real sample set is empty");
    ensure!(
        generations.iter().all(|(_, c)| *c != ArtifactClass::Real),
        Dataset,
        "generations must be labelled artifact or normal"
    );
    let mut feats = Vec::with_capacity(generations.len() + reals.len());
    let mut labels = Vec::with_capacity(feats.capacity());
    for (img, c) in generations {
        feats.push(extractor.embed(img)?);
        labels.push(*c);
    }
    for img in reals {
        feats.push(extractor.embed(img)?);
        labels.push(ArtifactClass::Real);
    }
    train_head(extractor, &feats, &labels, config, seed)
}

/// Mean binary cross-entropy of a real/fake split under a logit function;
/// exposed for pretraining diagnostics.
pub fn real_fake_loss(logits_real: &[f32], logits_fake: &[f32]) -> f32 {
    let n = (logits_real.len() + logits_fake.len()).max(1) as f32;
    (logits_real.iter().map(|l| softplus(-l)).sum::<f32>() + logits_fake.iter().map(|l| softplus(*l)).sum::<f32>()) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn tiny_extractor() -> FeatureExtractor {
        FeatureExtractor::new([3, 8, 8], &[(4, true), (3, false)], 1)
    }

    /// Three well-separated Gaussian clusters in 3-D.
    fn clusters(n: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<ArtifactClass>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 0.3).unwrap();
        let centers = [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]];
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..n {
            let c = i % 3;
            f.push(centers[c].iter().map(|m| m + noise.sample(&mut rng)).collect());
            l.push(ArtifactClass::from_index(c).unwrap());
        }
        (f, l)
    }

    #[test]
    fn separable_clusters_reach_high_holdout_accuracy() {
        let (f, l) = clusters(300, 4);
        let (_, report) = train_head(&tiny_extractor(), &f, &l, &ClassifierConfig::default(), 9).unwrap();
        assert!(report.holdout_size >= 50);
        assert!(report.holdout_accuracy >= 0.95, "{report:?}");
    }

    #[test]
    fn head_training_is_deterministic() {
        let (f, l) = clusters(60, 2);
        let cfg = ClassifierConfig {
            epochs: 50,
            ..ClassifierConfig::default()
        };
        let (a, _) = train_head(&tiny_extractor(), &f, &l, &cfg, 3).unwrap();
        let (b, _) = train_head(&tiny_extractor(), &f, &l, &cfg, 3).unwrap();
        assert_eq!(a.head_weight(), b.head_weight());
        assert_eq!(a.head_bias(), b.head_bias());
    }

    #[test]
    fn single_generation_class_is_rejected() {
        let (f, mut l) = clusters(30, 2);
        for c in l.iter_mut() {
            if *c == ArtifactClass::Normal {
                *c = ArtifactClass::Artifact;
            }
        }
        let err = train_head(&tiny_extractor(), &f, &l, &ClassifierConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
        let imgs = vec![(Tensor3::zeros(3, 8, 8), ArtifactClass::Artifact)];
        let err = train_artifact_classifier(&tiny_extractor(), &imgs, &[], &ClassifierConfig::default(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn probabilities_form_a_simplex_and_reject_wrong_resolution() {
        let e = tiny_extractor();
        let m = ClassifierModel::new(e, (0..9).map(|i| i as f32 * 0.1 - 0.4).collect(), [0.1, -0.2, 0.0]).unwrap();
        let img = Tensor3::from_vec(3, 8, 8, (0..192).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let p = classify(&m, &img).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(p, classify(&m, &img).unwrap());
        assert!(classify(&m, &Tensor3::zeros(3, 4, 4)).is_err());
    }

    #[test]
    fn classifier_checkpoint_roundtrip() {
        let m = ClassifierModel::new(tiny_extractor(), vec![0.5; 9], [0.0; 3]).unwrap();
        let back = ClassifierModel::from_archive(&m.to_archive().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pretraining_separates_constant_images() {
        let reals: Vec<Tensor3> = (0..4).map(|_| Tensor3::from_vec(3, 8, 8, vec![0.9; 192]).unwrap()).collect();
        let fakes: Vec<Tensor3> = (0..4).map(|_| Tensor3::zeros(3, 8, 8)).collect();
        let cfg = PretrainConfig {
            steps: 60,
            batch_size: 2,
            lr: 1e-2,
        };
        let before = tiny_extractor();
        let after = pretrain_extractor(before.clone(), &reals, &fakes, &cfg, 0).unwrap();
        assert_ne!(before.checksum(), after.checksum());
        let fr = after.embed(&reals[0]).unwrap();
        let ff = after.embed(&fakes[0]).unwrap();
        assert_ne!(fr, ff);
    }
}
