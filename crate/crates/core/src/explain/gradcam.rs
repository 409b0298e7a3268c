//! GradCAM over the classifier's conv blocks.

use crate::error::{Error, Result};
use crate::mask::ExplanationMask;
use crate::tensor::{bilinear_resize, Tensor3};

use super::{global_average, ArtifactClass, ClassifierModel};

/// Intermediate GradCAM quantities at the chosen block's resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    pub layer: usize,
    /// Target class logit.
    pub score: f32,
    /// Spatially averaged gradient of the score, one per channel.
    pub weights: Vec<f32>,
    /// Block activation (post-nonlinearity, before pooling).
    pub activation: Tensor3,
    /// `max(0, Σ_k w_k A_k)` at block resolution.
    pub map: Vec<f32>,
}

pub fn gradcam(model: &ClassifierModel, image: &Tensor3, target: ArtifactClass, layer: usize) -> Result<GradCam> {
    let ex = model.extractor();
    if layer >= ex.num_blocks() {
        return Err(Error::Config(format!(
            "explanation layer {layer} does not exist; extractor has {} blocks",
            ex.num_blocks()
        )));
    }
    ex.check_image(image)?;
    let stack = ex.stack();
    let tape = stack.forward_tape(image);
    let feat = global_average(&tape.output);
    let row = model.class_row(target);
    let score = model.logits_from_features(&feat)[target.index()];

    let [c, h, w] = stack.output_shape();
    let plane = (h * w) as f32;
    let mut g_out = Tensor3::zeros(c, h, w);
    for k in 0..c {
        g_out.channel_mut(k).fill(row[k] / plane);
    }
    let g = stack.backward(&tape, &g_out, None, Some(layer), false);
    let act = tape.activations[layer].clone();
    let n = act.plane_len() as f32;
    let weights: Vec<f32> = (0..act.channels()).map(|k| g.channel(k).iter().sum::<f32>() / n).collect();
    let mut map = vec![0.0f32; act.plane_len()];
    for (k, wk) in weights.iter().enumerate() {
        for (m, a) in map.iter_mut().zip(act.channel(k)) {
            *m += wk * a;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(GradCam {
        layer,
        score,
        weights,
        activation: act,
        map,
    })
}

/// Rectified GradCAM map upsampled to image resolution and scaled so its
/// maximum is 1 (all zeros when nothing is positive), with the binary set
/// `values >= threshold` attached.
pub fn gradcam_mask(
    model: &ClassifierModel,
    image: &Tensor3,
    target: ArtifactClass,
    layer: usize,
    threshold: f32,
) -> Result<ExplanationMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("mask threshold {threshold} outside [0, 1]")));
    }
    let cam = gradcam(model, image, target, layer)?;
    let [_, ah, aw] = cam.activation.shape();
    let (h, w) = (image.height(), image.width());
    let mut up = bilinear_resize(&cam.map, ah, aw, h, w);
    let max = up.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        up.iter_mut().for_each(|v| *v = 0.0);
    }
    ExplanationMask::new(h, w, up, Some(threshold))
}
