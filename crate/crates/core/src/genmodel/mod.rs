//! Desk-scale layered generator with instrumented forward passes.
//!
//! Layer 0 is a dense layer reshaped to `C₀ × S × S`; each following hidden
//! layer is nearest 2× upsampling plus a 3×3 convolution; the last layer is a
//! 3×3 output convolution with a sigmoid. A *unit* is one output channel of a
//! layer. Interventions act on a unit's post-activation map before the next
//! layer reads it.

mod plant;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::error::{ensure, Error, Result};
use crate::nn::{he_std, init_normal};
use crate::tensor::{
    conv3x3, conv3x3_backward, dense, dense_backward, leaky_relu, leaky_relu_grad, sigmoid, upsample2x,
    upsample2x_backward, Tensor3,
};

pub use plant::{plant_artifact_units, ArtifactPlant, MaskOracle, PlantSpec, PlantedGenerator};
pub use train::{train_toy_pair, Discriminator, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    DenseReshape,
    UpsampleConv,
    OutputConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub units: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerSpec {
    pub fn shape(&self) -> [usize; 3] {
        [self.units, self.height, self.width]
    }
}

/// A feature-map channel of a generator layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub unit: usize,
}

impl UnitId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl std::fmt::Display for UnitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}U{}", self.layer, self.unit)
    }
}

/// Shape hyper-parameters of the toy generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub base_size: usize,
    /// Channel counts of the upsample-conv layers (layers `1..=len`).
    pub hidden_channels: Vec<usize>,
    pub out_channels: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            base_channels: 64,
            base_size: 4,
            hidden_channels: vec![32, 48, 16],
            out_channels: 3,
        }
    }
}

impl GeneratorArch {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_dim >= 1, Config, "latent_dim must be >= 1");
        ensure!(
            self.base_channels >= 1 && self.base_size >= 1 && self.out_channels >= 1,
            Config,
            "channel counts and base size must be >= 1"
        );
        ensure!(
            self.hidden_channels.iter().all(|c| *c >= 1),
            Config,
            "hidden layers need >= 1 unit"
        );
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec {
            index: 0,
            kind: LayerKind::DenseReshape,
            units: self.base_channels,
            height: self.base_size,
            width: self.base_size,
        }];
        let mut size = self.base_size;
        for (i, &c) in self.hidden_channels.iter().enumerate() {
            size *= 2;
            specs.push(LayerSpec {
                index: i + 1,
                kind: LayerKind::UpsampleConv,
                units: c,
                height: size,
                width: size,
            });
        }
        specs.push(LayerSpec {
            index: specs.len(),
            kind: LayerKind::OutputConv,
            units: self.out_channels,
            height: size,
            width: size,
        });
        specs
    }

    pub fn image_size(&self) -> usize {
        self.base_size << self.hidden_channels.len()
    }
}

/// A point in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f32>);

impl LatentCode {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        ensure!(!values.is_empty(), InvalidInput, "latent code is empty");
        ensure!(
            values.iter().all(|v| v.is_finite()),
            InvalidInput,
            "latent code has non-finite entries"
        );
        Ok(Self(values))
    }

    /// Standard-normal latent drawn from its own seed.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Per-layer activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapStack {
    layers: Vec<Tensor3>,
}

impl FeatureMapStack {
    pub fn layer(&self, index: usize) -> Option<&Tensor3> {
        self.layers.get(index)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn shapes(&self) -> Vec<[usize; 3]> {
        self.layers.iter().map(Tensor3::shape).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum UnitWeight {
    Scalar(f32),
    /// Row-major `H_l × W_l` elementwise multipliers.
    Map(Vec<f32>),
}

/// Per-call multipliers on unit maps. At most one entry per unit; every
/// multiplier lies in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterventionPlan {
    entries: BTreeMap<UnitId, UnitWeight>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, unit: UnitId, weight: UnitWeight) -> Result<()> {
        let ok = match &weight {
            UnitWeight::Scalar(s) => (0.0..=1.0).contains(s),
            UnitWeight::Map(m) => m.iter().all(|s| (0.0..=1.0).contains(s)),
        };
        ensure!(ok, InvalidPlan, "multipliers for {unit} must lie in [0, 1]");
        if self.entries.contains_key(&unit) {
            return Err(Error::InvalidPlan(format!("duplicate entry for {unit}")));
        }
        self.entries.insert(unit, weight);
        Ok(())
    }

    /// Plan zeroing every listed unit.
    pub fn zero_units(units: impl IntoIterator<Item = UnitId>) -> Result<Self> {
        let mut plan = Self::new();
        for u in units {
            plan.insert(u, UnitWeight::Scalar(0.0))?;
        }
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&UnitId, &UnitWeight)> {
        self.entries.iter()
    }

    fn layer_entries(&self, layer: usize) -> impl Iterator<Item = (&UnitId, &UnitWeight)> {
        self.entries
            .range(UnitId::new(layer, 0)..=UnitId::new(layer, usize::MAX))
    }

    pub fn validate(&self, model: &GeneratorModel) -> Result<()> {
        for (id, w) in &self.entries {
            let spec = model
                .layer(id.layer)
                .ok_or_else(|| Error::InvalidPlan(format!("unknown layer in {id}")))?;
            ensure!(id.unit < spec.units, InvalidPlan, "unknown unit {id}");
            if let UnitWeight::Map(m) = w {
                ensure!(
                    m.len() == spec.height * spec.width,
                    InvalidPlan,
                    "weight map for {id} has {} values, layer is {}x{}",
                    m.len(),
                    spec.height,
                    spec.width
                );
            }
        }
        Ok(())
    }
}

fn apply_layer_plan(plan: &InterventionPlan, layer: usize, h: &mut Tensor3) {
    for (id, w) in plan.layer_entries(layer) {
        let plane = h.channel_mut(id.unit);
        match w {
            UnitWeight::Scalar(s) => plane.iter_mut().for_each(|v| *v *= s),
            UnitWeight::Map(m) => plane.iter_mut().zip(m).for_each(|(v, s)| *v *= s),
        }
    }
}

/// Intermediate values for backpropagation through the generator.
pub(crate) struct GenTape {
    /// Input fed to each layer's linear map (latent for layer 0).
    inputs: Vec<Tensor3>,
    pre: Vec<Tensor3>,
    pub(crate) image: Tensor3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    arch: GeneratorArch,
    specs: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    plant: Option<ArtifactPlant>,
}

impl GeneratorModel {
    /// Randomly initialised generator.
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let specs = arch.layer_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        let mut prev_units = arch.latent_dim;
        for s in &specs {
            let p = match s.kind {
                LayerKind::DenseReshape => {
                    let n_out = s.units * s.height * s.width;
                    LayerParams {
                        weight: init_normal(&mut rng, n_out * arch.latent_dim, he_std(arch.latent_dim)),
                        bias: vec![0.0; n_out],
                    }
                }
                LayerKind::UpsampleConv | LayerKind::OutputConv => LayerParams {
                    weight: init_normal(&mut rng, s.units * prev_units * 9, he_std(prev_units * 9)),
                    bias: vec![0.0; s.units],
                },
            };
            prev_units = s.units;
            params.push(p);
        }
        Ok(Self {
            arch,
            specs,
            params,
            plant: None,
        })
    }

    /// Generator with explicit parameters, one [`LayerParams`] per layer.
    pub fn from_parameters(arch: GeneratorArch, params: Vec<LayerParams>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.layer_specs();
        ensure!(
            params.len() == specs.len(),
            InvalidInput,
            "expected {} parameter blocks, got {}",
            specs.len(),
            params.len()
        );
        let mut prev = arch.latent_dim;
        for (s, p) in specs.iter().zip(&params) {
            let (w, b) = match s.kind {
                LayerKind::DenseReshape => {
                    let n = s.units * s.height * s.width;
                    (n * arch.latent_dim, n)
                }
                _ => (s.units * prev * 9, s.units),
            };
            ensure!(
                p.weight.len() == w && p.bias.len() == b,
                InvalidInput,
                "layer {} expects {w} weights and {b} biases",
                s.index
            );
            prev = s.units;
        }
        Ok(Self {
            arch,
            specs,
            params,
            plant: None,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn layer_specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.specs.get(index)
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn output_layer(&self) -> usize {
        self.specs.len() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.specs[self.output_layer()].shape()
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn plant(&self) -> Option<&ArtifactPlant> {
        self.plant.as_ref()
    }

    pub(crate) fn set_plant(&mut self, plant: Option<ArtifactPlant>) {
        self.plant = plant;
    }

    /// Same parameters with any planted artifact gate removed.
    pub fn without_plant(&self) -> Self {
        let mut m = self.clone();
        m.plant = None;
        m
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        ensure!(
            z.dim() == self.arch.latent_dim,
            InvalidInput,
            "latent has dimension {}, model expects {}",
            z.dim(),
            self.arch.latent_dim
        );
        Ok(())
    }

    fn layer_forward(&self, index: usize, h: &Tensor3, z: &LatentCode) -> Tensor3 {
        let s = &self.specs[index];
        let p = &self.params[index];
        let mut out = match s.kind {
            LayerKind::DenseReshape => {
                let v = dense(z.values(), &p.weight, &p.bias);
                Tensor3::from_vec(s.units, s.height, s.width, v).expect("dense output sized by spec")
            }
            LayerKind::UpsampleConv => conv3x3(&upsample2x(h), &p.weight, &p.bias),
            LayerKind::OutputConv => conv3x3(h, &p.weight, &p.bias),
        };
        if s.kind == LayerKind::OutputConv {
            out.map_inplace(sigmoid);
        } else {
            out.map_inplace(leaky_relu);
        }
        out
    }

    /// Shared forward: optional plan, optional recording, optional early stop
    /// after layer `stop` (in which case the returned tensor is that layer's
    /// activation).
    fn run(
        &self,
        z: &LatentCode,
        plan: Option<&InterventionPlan>,
        record: bool,
        stop: Option<usize>,
    ) -> Result<(Tensor3, Option<FeatureMapStack>)> {
        self.check_latent(z)?;
        if let Some(p) = plan {
            p.validate(self)?;
        }
        let last = stop.unwrap_or(self.output_layer()).min(self.output_layer());
        let mut layers = Vec::new();
        let mut h = Tensor3::zeros(0, 0, 0);
        for index in 0..=last {
            h = self.layer_forward(index, &h, z);
            if let Some(plant) = &self.plant {
                plant.apply(index, z, &mut h);
            }
            if let Some(p) = plan {
                apply_layer_plan(p, index, &mut h);
            }
            if record {
                layers.push(h.clone());
            }
        }
        Ok((h, record.then_some(FeatureMapStack { layers })))
    }

    /// Image in `[0,1]^{3×H×W}`, plus every layer's activations when `record`.
    pub fn generate(&self, z: &LatentCode, record: bool) -> Result<(Tensor3, Option<FeatureMapStack>)> {
        self.run(z, None, record, None)
    }

    pub fn image(&self, z: &LatentCode) -> Result<Tensor3> {
        Ok(self.run(z, None, false, None)?.0)
    }

    pub fn forward_with_interventions(&self, z: &LatentCode, plan: &InterventionPlan) -> Result<Tensor3> {
        Ok(self.run(z, Some(plan), false, None)?.0)
    }

    pub fn forward_recorded(
        &self,
        z: &LatentCode,
        plan: &InterventionPlan,
    ) -> Result<(Tensor3, FeatureMapStack)> {
        let (img, stack) = self.run(z, Some(plan), true, None)?;
        Ok((img, stack.expect("recorded")))
    }

    /// Activation block of one layer, computing nothing past it.
    pub fn layer_activation(&self, z: &LatentCode, layer: usize) -> Result<Tensor3> {
        ensure!(layer < self.num_layers(), InvalidInput, "unknown layer {layer}");
        Ok(self.run(z, None, false, Some(layer))?.0)
    }

    /// SHA-256 over all parameter bits (and the plant definition, if any).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.weight.iter().chain(&p.bias) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        if let Some(plant) = &self.plant {
            h.update(serde_json::to_vec(plant).expect("plant serializes"));
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn forward_tape(&self, z: &LatentCode) -> GenTape {
        let mut inputs = Vec::with_capacity(self.specs.len());
        let mut pre = Vec::with_capacity(self.specs.len());
        let mut h = Tensor3::from_vec(z.dim(), 1, 1, z.values().to_vec()).expect("latent tensor");
        for (s, p) in self.specs.iter().zip(&self.params) {
            let (input, out) = match s.kind {
                LayerKind::DenseReshape => {
                    let v = dense(h.data(), &p.weight, &p.bias);
                    (h.clone(), Tensor3::from_vec(s.units, s.height, s.width, v).expect("sized"))
                }
                LayerKind::UpsampleConv => {
                    let up = upsample2x(&h);
                    let o = conv3x3(&up, &p.weight, &p.bias);
                    (up, o)
                }
                LayerKind::OutputConv => (h.clone(), conv3x3(&h, &p.weight, &p.bias)),
            };
            let mut act = out.clone();
            if s.kind == LayerKind::OutputConv {
                act.map_inplace(sigmoid);
            } else {
                act.map_inplace(leaky_relu);
            }
            inputs.push(input);
            pre.push(out);
            h = act;
        }
        GenTape {
            inputs,
            pre,
            image: h,
        }
    }

    /// Parameter gradients (`[w0, b0, w1, b1, ...]`) given the loss gradient
    /// w.r.t. the output image.
    pub(crate) fn backward(&self, tape: &GenTape, grad_image: &Tensor3) -> Vec<Vec<f32>> {
        let n = self.specs.len();
        let mut grads: Vec<Vec<f32>> = self
            .params
            .iter()
            .flat_map(|p| [vec![0.0; p.weight.len()], vec![0.0; p.bias.len()]])
            .collect();
        let mut g = grad_image.clone();
        for index in (0..n).rev() {
            let s = &self.specs[index];
            // through the activation
            if s.kind == LayerKind::OutputConv {
                for (gv, o) in g.data_mut().iter_mut().zip(tape.image.data()) {
                    *gv *= o * (1.0 - o);
                }
            } else {
                for (gv, p) in g.data_mut().iter_mut().zip(tape.pre[index].data()) {
                    *gv *= leaky_relu_grad(*p);
                }
            }
            let (gw, gb) = grads.split_at_mut(2 * index + 1);
            let gw = &mut gw[2 * index];
            let gb = &mut gb[0];
            let p = &self.params[index];
            match s.kind {
                LayerKind::DenseReshape => {
                    dense_backward(tape.inputs[index].data(), &p.weight, g.data(), Some((gw, gb)), false);
                }
                LayerKind::UpsampleConv => {
                    let gi = conv3x3_backward(&tape.inputs[index], &p.weight, &g, Some((gw, gb)), true)
                        .expect("input grad");
                    g = upsample2x_backward(&gi);
                }
                LayerKind::OutputConv => {
                    g = conv3x3_backward(&tape.inputs[index], &p.weight, &g, Some((gw, gb)), true)
                        .expect("input grad");
                }
            }
        }
        grads
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let meta = serde_json::json!({
            "kind": "generator",
            "arch": self.arch,
            "layers": self.specs,
            "plant": self.plant,
        });
        let mut a = TensorArchive::new(meta);
        for (i, p) in self.params.iter().enumerate() {
            a.push(format!("layer{i}.weight"), &[p.weight.len()], p.weight.clone())?;
            a.push(format!("layer{i}.bias"), &[p.bias.len()], p.bias.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        if archive.meta.get("kind").and_then(|k| k.as_str()) != Some("generator") {
            return Err(Error::Archive("not a generator checkpoint".into()));
        }
        let arch: GeneratorArch = serde_json::from_value(archive.meta["arch"].clone())?;
        let declared: Vec<LayerSpec> = serde_json::from_value(archive.meta["layers"].clone())?;
        ensure!(
            declared == arch.layer_specs(),
            InvalidInput,
            "manifest layer specs disagree with the architecture"
        );
        let mut params = Vec::new();
        for i in 0..declared.len() {
            let w = archive
                .get(&format!("layer{i}.weight"))
                .ok_or_else(|| Error::Archive(format!("missing layer{i}.weight")))?;
            let b = archive
                .get(&format!("layer{i}.bias"))
                .ok_or_else(|| Error::Archive(format!("missing layer{i}.bias")))?;
            params.push(LayerParams {
                weight: w.data.clone(),
                bias: b.data.clone(),
            });
        }
        let mut model = Self::from_parameters(arch, params)?;
        let plant: Option<ArtifactPlant> = serde_json::from_value(archive.meta["plant"].clone())?;
        if let Some(p) = &plant {
            p.validate_for(&model)?;
        }
        model.plant = plant;
        Ok(model)
    }
}
