//! Ground-truth artifact units.
//!
//! Planting silences a set of hidden units and rewires them into a gated
//! blob generator: when a latent falls in the trigger half-space the units
//! emit a compact bump at a latent-dependent position, and the next layer's
//! weights from those units paint it as a high-contrast patch. Non-triggered
//! latents leave the units at exactly zero, so the planted and clean models
//! agree bit-for-bit there, and zero-ablating the planted set cancels the
//! artifact exactly.
//!
//! With precursors, the bump is injected one layer earlier into a few
//! silenced precursor units whose only outgoing connections are centre taps
//! into the planted units, so the artifact flows through two layers.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{GeneratorModel, LatentCode, LayerKind, UnitId};
use crate::error::{ensure, Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Tensor3, LEAKY_SLOPE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub layer: usize,
    pub units: Vec<usize>,
    /// Probability that a standard-normal latent triggers the artifact.
    pub trigger_fraction: f64,
    /// Blob radius in the planted layer's pixels.
    pub radius: f32,
    /// Approximate output-logit push at the blob peak.
    pub intensity: f32,
    /// Target colour the blob drives toward.
    pub color: [f32; 3],
    /// Silenced units in the layer below that carry the gated bump into the
    /// planted units; 0 injects the bump directly.
    #[serde(default)]
    pub precursor_units: usize,
}

impl PlantSpec {
    /// Spec with `count` distinct units drawn from the layer with `seed`.
    pub fn random_units(model: &GeneratorModel, layer: usize, count: usize, seed: u64) -> Result<Self> {
        let spec = model
            .layer(layer)
            .ok_or_else(|| Error::InvalidInput(format!("unknown layer {layer}")))?;
        ensure!(count <= spec.units, InvalidInput, "cannot plant {count} of {} units", spec.units);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<usize> = (0..spec.units).collect();
        for i in 0..count {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut units = pool[..count].to_vec();
        units.sort_unstable();
        Ok(Self {
            layer,
            units,
            ..Self::default()
        })
    }
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            layer: 2,
            units: Vec::new(),
            trigger_fraction: 0.3,
            radius: 4.0,
            intensity: 6.0,
            color: [1.0, 0.0, 1.0],
            precursor_units: 6,
        }
    }
}

/// The gate and blob geometry carried by a planted generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPlant {
    pub layer: usize,
    pub units: Vec<usize>,
    pub gate_direction: Vec<f32>,
    pub gate_threshold: f64,
    pub x_direction: Vec<f32>,
    pub y_direction: Vec<f32>,
    pub radius: f32,
    pub amplitudes: Vec<f32>,
    pub offsets: Vec<[f32; 2]>,
    /// `[height, width]` of the planted layer.
    pub layer_size: [usize; 2],
    /// `[height, width]` of the generated image.
    pub image_size: [usize; 2],
    /// Precursor units in layer `layer - 1`, with their bump offsets (in
    /// planted-layer pixels).
    #[serde(default)]
    pub precursors: Vec<usize>,
    #[serde(default)]
    pub precursor_offsets: Vec<[f32; 2]>,
}

fn project(direction: &[f32], z: &LatentCode) -> f64 {
    direction
        .iter()
        .zip(z.values())
        .map(|(d, v)| *d as f64 * *v as f64)
        .sum()
}

fn std_normal() -> Normal {
    Normal::standard()
}

impl ArtifactPlant {
    pub fn is_triggered(&self, z: &LatentCode) -> bool {
        project(&self.gate_direction, z) > self.gate_threshold
    }

    /// Blob centre in planted-layer pixel coordinates (continuous).
    pub fn center(&self, z: &LatentCode) -> (f32, f32) {
        let [h, w] = self.layer_size;
        let margin = self.radius.min(w.min(h) as f32 / 2.0);
        let n = std_normal();
        let fx = n.cdf(project(&self.x_direction, z)) as f32;
        let fy = n.cdf(project(&self.y_direction, z)) as f32;
        (
            margin + (w as f32 - 2.0 * margin) * fx,
            margin + (h as f32 - 2.0 * margin) * fy,
        )
    }

    /// `amp·(1 − d²/r²)²` around the blob centre shifted by `offset`, on a
    /// grid `scale` times coarser than the planted layer.
    fn bump(&self, z: &LatentCode, offset: [f32; 2], amp: f32, scale: usize) -> Vec<f32> {
        let [h, w] = self.layer_size;
        let (h, w) = (h / scale, w / scale);
        let s = scale as f32;
        let (cx, cy) = self.center(z);
        let (cx, cy) = ((cx + offset[0]) / s, (cy + offset[1]) / s);
        let r = self.radius / s;
        let r2 = r * r;
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = x as f32 + 0.5 - cx;
                let dy = y as f32 + 0.5 - cy;
                let t = 1.0 - (dx * dx + dy * dy) / r2;
                if t > 0.0 {
                    out[y * w + x] = amp * t * t;
                }
            }
        }
        out
    }

    /// The bump injected into planted unit `k` (index into `units`) when
    /// there are no precursors.
    pub fn unit_map(&self, z: &LatentCode, k: usize) -> Vec<f32> {
        self.bump(z, self.offsets[k], self.amplitudes[k], 1)
    }

    /// The unit-amplitude bump carried by precursor `j` at half resolution.
    pub fn precursor_map(&self, z: &LatentCode, j: usize) -> Vec<f32> {
        self.bump(z, self.precursor_offsets[j], 1.0, 2)
    }

    /// Adds the gated bumps to layer `index`'s activation.
    pub(crate) fn apply(&self, index: usize, z: &LatentCode, h: &mut Tensor3) {
        let direct = self.precursors.is_empty();
        let target = if direct { self.layer } else { self.layer - 1 };
        if index != target || !self.is_triggered(z) {
            return;
        }
        let (units, maps): (&[usize], Vec<Vec<f32>>) = if direct {
            (&self.units, (0..self.units.len()).map(|k| self.unit_map(z, k)).collect())
        } else {
            (&self.precursors, (0..self.precursors.len()).map(|j| self.precursor_map(z, j)).collect())
        };
        for (&u, bump) in units.iter().zip(&maps) {
            for (v, b) in h.channel_mut(u).iter_mut().zip(bump) {
                *v += b;
            }
        }
    }

    /// Image-space disk covered by the blob; empty for non-triggered latents.
    pub fn oracle_mask(&self, z: &LatentCode) -> BinaryMask {
        let [ih, iw] = self.image_size;
        if !self.is_triggered(z) {
            return BinaryMask::empty(ih, iw);
        }
        let [lh, lw] = self.layer_size;
        let (sy, sx) = (lh as f32 / ih as f32, lw as f32 / iw as f32);
        let (cx, cy) = self.center(z);
        let r2 = self.radius * self.radius;
        let bits = (0..ih * iw)
            .map(|i| {
                let (y, x) = (i / iw, i % iw);
                let dx = (x as f32 + 0.5) * sx - cx;
                let dy = (y as f32 + 0.5) * sy - cy;
                dx * dx + dy * dy < r2
            })
            .collect();
        BinaryMask {
            height: ih,
            width: iw,
            bits,
        }
    }

    pub(crate) fn validate_for(&self, model: &GeneratorModel) -> Result<()> {
        let spec = model
            .layer(self.layer)
            .ok_or_else(|| Error::Archive(format!("plant references unknown layer {}", self.layer)))?;
        ensure!(
            self.units.iter().all(|u| *u < spec.units)
                && self.amplitudes.len() == self.units.len()
                && self.offsets.len() == self.units.len()
                && self.layer_size == [spec.height, spec.width]
                && self.gate_direction.len() == model.latent_dim(),
            InvalidInput,
            "plant definition does not fit the model"
        );
        if !self.precursors.is_empty() {
            let below = self.layer.checked_sub(1).and_then(|l| model.layer(l));
            ensure!(
                below.is_some_and(|b| self.precursors.iter().all(|u| *u < b.units)
                    && [b.height * 2, b.width * 2] == self.layer_size)
                    && self.precursor_offsets.len() == self.precursors.len(),
                InvalidInput,
                "plant precursors do not fit the model"
            );
        }
        Ok(())
    }
}

/// Maps any latent to the exact image-space blob region of a planted model.
#[derive(Clone, Debug)]
pub struct MaskOracle {
    plant: ArtifactPlant,
}

impl MaskOracle {
    pub fn new(plant: ArtifactPlant) -> Self {
        Self { plant }
    }

    pub fn mask(&self, z: &LatentCode) -> BinaryMask {
        self.plant.oracle_mask(z)
    }

    pub fn is_triggered(&self, z: &LatentCode) -> bool {
        self.plant.is_triggered(z)
    }
}

/// Result of [`plant_artifact_units`].
#[derive(Clone, Debug)]
pub struct PlantedGenerator {
    /// Generator with the gated artifact.
    pub model: GeneratorModel,
    /// Same parameters without the gate: the artifact-free reference.
    pub clean: GeneratorModel,
    pub ground_truth: BTreeSet<UnitId>,
    /// Precursor units one layer below, empty for direct injection.
    pub precursors: BTreeSet<UnitId>,
}

impl PlantedGenerator {
    pub fn oracle(&self) -> MaskOracle {
        MaskOracle::new(self.model.plant().expect("planted model carries its plant").clone())
    }

    /// The first `count` latents (by seed, starting at `first_seed`) with the
    /// requested trigger state, paired with their seeds.
    pub fn latents_where(
        &self,
        triggered: bool,
        count: usize,
        first_seed: u64,
    ) -> Vec<(u64, LatentCode)> {
        let plant = self.model.plant().expect("planted");
        let dim = self.model.latent_dim();
        (first_seed..)
            .map(|s| (s, LatentCode::from_seed(s, dim)))
            .filter(|(_, z)| plant.is_triggered(z) == triggered)
            .take(count)
            .collect()
    }
}

fn orthonormal_directions(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            dirs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    dirs
}

/// Plants gated artifact units into a copy of `model`.
///
/// The planted units' incoming weights and biases are zeroed, their outgoing
/// weights into the next layer are replaced by a centre-tap painting kernel
/// toward `spec.color`, and a latent half-space gate with probability
/// `spec.trigger_fraction` switches the blob on.
pub fn plant_artifact_units(model: &GeneratorModel, spec: &PlantSpec, seed: u64) -> Result<PlantedGenerator> {
    let out_layer = model.output_layer();
    let layer = model
        .layer(spec.layer)
        .ok_or_else(|| Error::InvalidInput(format!("unknown layer {}", spec.layer)))?
        .clone();
    ensure!(
        spec.layer < out_layer,
        InvalidInput,
        "artifacts must originate in hidden units, layer {} is the output layer",
        spec.layer
    );
    ensure!(!spec.units.is_empty(), InvalidInput, "no units to plant");
    let distinct: BTreeSet<usize> = spec.units.iter().copied().collect();
    ensure!(distinct.len() == spec.units.len(), InvalidInput, "planted units must be distinct");
    ensure!(
        spec.units.iter().all(|u| *u < layer.units),
        InvalidInput,
        "planted unit out of range for layer {} ({} units)",
        spec.layer,
        layer.units
    );
    ensure!(
        spec.trigger_fraction > 0.0 && spec.trigger_fraction < 1.0,
        InvalidInput,
        "trigger fraction must lie in (0, 1)"
    );
    ensure!(
        spec.radius > 0.0 && spec.intensity.is_finite() && spec.intensity > 0.0,
        InvalidInput,
        "radius and intensity must be positive"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.latent_dim();
    let dirs = orthonormal_directions(&mut rng, dim, 3);
    let to_f32 = |v: &Vec<f64>| v.iter().map(|a| *a as f32).collect::<Vec<f32>>();
    let amplitudes: Vec<f32> = spec.units.iter().map(|_| rng.random_range(0.7f32..1.3)).collect();
    let offsets: Vec<[f32; 2]> = spec
        .units
        .iter()
        .map(|_| [rng.random_range(-0.35f32..0.35), rng.random_range(-0.35f32..0.35)])
        .collect();
    ensure!(
        spec.precursor_units == 0 || spec.layer >= 1,
        InvalidInput,
        "precursors need a layer below the planted layer"
    );
    let below = spec.layer.checked_sub(1).and_then(|l| model.layer(l)).cloned();
    let precursors: Vec<usize> = match &below {
        Some(b) if spec.precursor_units > 0 => {
            ensure!(
                spec.precursor_units <= b.units && layer.kind == LayerKind::UpsampleConv,
                InvalidInput,
                "cannot route {} precursors from layer {} into layer {}",
                spec.precursor_units,
                b.index,
                spec.layer
            );
            let mut pool: Vec<usize> = (0..b.units).collect();
            for i in 0..spec.precursor_units {
                let j = rng.random_range(i..pool.len());
                pool.swap(i, j);
            }
            let mut p = pool[..spec.precursor_units].to_vec();
            p.sort_unstable();
            p
        }
        _ => Vec::new(),
    };
    let precursor_offsets: Vec<[f32; 2]> = precursors
        .iter()
        .map(|_| [rng.random_range(-0.35f32..0.35), rng.random_range(-0.35f32..0.35)])
        .collect();
    let image = model.image_shape();
    let plant = ArtifactPlant {
        layer: spec.layer,
        units: spec.units.clone(),
        gate_direction: to_f32(&dirs[0]),
        gate_threshold: std_normal().inverse_cdf(1.0 - spec.trigger_fraction),
        x_direction: to_f32(&dirs[1]),
        y_direction: to_f32(&dirs[2]),
        radius: spec.radius,
        amplitudes: amplitudes.clone(),
        offsets,
        layer_size: [layer.height, layer.width],
        image_size: [image[1], image[2]],
        precursors: precursors.clone(),
        precursor_offsets,
    };

    let mut planted = model.without_plant();
    let next = spec.layer + 1;
    let next_units = model.layer(next).expect("hidden layer has a successor").units;
    let target: Vec<f32> = spec.color.iter().map(|c| if *c >= 0.5 { 1.0 } else { -1.0 }).collect();

    // Colour response of each channel of `next`, linearised through later layers.
    let mut response: Vec<Vec<f32>> = (0..next_units)
        .map(|o| (0..next_units).map(|i| if i == o { 1.0 } else { 0.0 }).collect())
        .collect();
    for l in next + 1..model.num_layers() {
        let units = model.layer(l).expect("layer").units;
        let prev = response.len();
        let w = &model.params()[l].weight;
        let tap_sum =
            |o: usize, i: usize| -> f32 { w[(o * prev + i) * 9..(o * prev + i) * 9 + 9].iter().sum() };
        response = (0..units)
            .map(|o| {
                (0..next_units)
                    .map(|c| (0..prev).map(|i| tap_sum(o, i) * response[i][c]).sum())
                    .collect()
            })
            .collect();
    }
    let next_is_output = next == out_layer;
    let score: Vec<f32> = (0..next_units)
        .map(|c| {
            if next_is_output {
                target.get(c).copied().unwrap_or(0.0)
            } else {
                response
                    .iter()
                    .zip(&target)
                    .map(|(row, t)| row[c] * t)
                    .sum()
            }
        })
        .collect();
    let effective: f32 = score
        .iter()
        .map(|s| {
            let slope = if next_is_output || *s >= 0.0 { 1.0 } else { LEAKY_SLOPE };
            slope * s.abs()
        })
        .sum();
    ensure!(effective > 0.0, InvalidInput, "downstream layers cannot express the blob colour");
    let drive = spec.intensity / effective;
    let amp_sum: f32 = amplitudes.iter().sum();

    {
        let specs = planted.layer_specs().to_vec();
        let params = planted.params_mut();
        silence(&mut params[spec.layer], &specs[spec.layer], &spec.units, dim);
        if let Some(b) = &below {
            if !precursors.is_empty() {
                silence(&mut params[b.index], b, &precursors, dim);
                // precursors feed only the planted units, each through a
                // centre tap carrying that unit's amplitude
                let p = &mut params[spec.layer];
                for o in 0..layer.units {
                    for &u in &precursors {
                        let base = (o * b.units + u) * 9;
                        p.weight[base..base + 9].fill(0.0);
                    }
                }
                for (k, &o) in spec.units.iter().enumerate() {
                    let u = precursors[k % precursors.len()];
                    p.weight[(o * b.units + u) * 9 + 4] = amplitudes[k];
                }
            }
        }
        let q = &mut params[next];
        for o in 0..next_units {
            for &u in &spec.units {
                let base = (o * layer.units + u) * 9;
                q.weight[base..base + 9].fill(0.0);
                q.weight[base + 4] = score[o].signum() * drive / amp_sum;
            }
        }
    }
    let clean = planted.clone();
    planted.set_plant(Some(plant));
    let ground_truth = spec.units.iter().map(|u| UnitId::new(spec.layer, *u)).collect();
    let precursors = precursors.iter().map(|u| UnitId::new(spec.layer - 1, *u)).collect();
    Ok(PlantedGenerator {
        model: planted,
        clean,
        ground_truth,
        precursors,
    })
}

/// Zeroes the incoming weights and biases of `units`.
fn silence(p: &mut super::LayerParams, layer: &super::LayerSpec, units: &[usize], latent_dim: usize) {
    match layer.kind {
        LayerKind::DenseReshape => {
            let plane = layer.height * layer.width;
            for &u in units {
                for row in u * plane..(u + 1) * plane {
                    p.weight[row * latent_dim..(row + 1) * latent_dim].fill(0.0);
                    p.bias[row] = 0.0;
                }
            }
        }
        _ => {
            let fan = p.weight.len() / layer.units;
            for &u in units {
                p.weight[u * fan..(u + 1) * fan].fill(0.0);
                p.bias[u] = 0.0;
            }
        }
    }
}
