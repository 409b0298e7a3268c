use serde::Serialize;

use crate::error::{ensure, Result};
use crate::genmodel::{GeneratorModel, LatentCode, UnitId};
use crate::imageio::{grid, overlay_heatmap};
use crate::tensor::{bilinear_resize, Tensor3};

use super::{spatial_mean, top_k_indices};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepresentativeImage {
    pub unit: UnitId,
    /// Positions in the input latent list, most activating first.
    pub indices: Vec<usize>,
    pub magnitudes: Vec<f32>,
    pub map_height: usize,
    pub map_width: usize,
    pub mean_map: Vec<f32>,
    #[serde(skip)]
    pub gallery: Vec<Tensor3>,
}

impl RepresentativeImage {
    /// Gallery tiles with the max-normalised mean map overlaid as a heatmap.
    pub fn render(&self, cols: usize) -> Tensor3 {
        let max = self.mean_map.iter().cloned().fold(0.0f32, f32::max);
        let norm: Vec<f32> = self
            .mean_map
            .iter()
            .map(|v| if max > 0.0 { (v / max).max(0.0) } else { 0.0 })
            .collect();
        let tiles: Vec<Tensor3> = self
            .gallery
            .iter()
            .map(|img| {
                let heat = bilinear_resize(&norm, self.map_height, self.map_width, img.height(), img.width());
                overlay_heatmap(img, &heat, 0.5)
            })
            .collect();
        grid(&tiles, cols)
    }
}

/// The `m` generations whose unit map has the largest spatial mean (ties to
/// the lower latent index) and their mean map.
pub fn representative_image(
    model: &GeneratorModel,
    latents: &[LatentCode],
    unit: UnitId,
    m: usize,
) -> Result<RepresentativeImage> {
    ensure!(m >= 1 && m <= latents.len(), InvalidInput, "m = {m} must lie in 1..={}", latents.len());
    let spec = model
        .layer(unit.layer)
        .filter(|_| unit.layer < model.output_layer())
        .ok_or_else(|| crate::Error::InvalidInput(format!("{unit} is not in a hidden layer")))?;
    ensure!(unit.unit < spec.units, InvalidInput, "unknown unit {unit}");
    let maps = latents
        .iter()
        .map(|z| Ok(model.layer_activation(z, unit.layer)?.channel(unit.unit).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mags: Vec<f32> = maps.iter().map(|p| spatial_mean(p)).collect();
    let indices = top_k_indices(&mags, m);
    let mut mean_map = vec![0.0f32; spec.height * spec.width];
    for i in &indices {
        for (acc, v) in mean_map.iter_mut().zip(&maps[*i]) {
            *acc += v;
        }
    }
    mean_map.iter_mut().for_each(|v| *v /= m as f32);
    let gallery = indices.iter().map(|i| model.image(&latents[*i])).collect::<Result<Vec<_>>>()?;
    Ok(RepresentativeImage {
        unit,
        magnitudes: indices.iter().map(|i| mags[*i]).collect(),
        indices,
        map_height: spec.height,
        map_width: spec.width,
        mean_map,
        gallery,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::GeneratorArch;

    #[test]
    fn single_member_mean_is_that_map() {
        let model = GeneratorModel::new(GeneratorArch::default(), 3).unwrap();
        let zs: Vec<LatentCode> = (0..6).map(|s| LatentCode::from_seed(s, 32)).collect();
        let unit = UnitId::new(2, 5);
        let r = representative_image(&model, &zs, unit, 1).unwrap();
        let expect = model.layer_activation(&zs[r.indices[0]], 2).unwrap().channel(5).to_vec();
        assert_eq!(r.mean_map, expect);
        let all = representative_image(&model, &zs, unit, 6).unwrap();
        assert!(all.magnitudes.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(all.render(3).shape()[0], 3);
    }

    #[test]
    fn identical_latents_give_identical_gallery() {
        let model = GeneratorModel::new(GeneratorArch::default(), 3).unwrap();
        let zs = vec![LatentCode::from_seed(9, 32); 4];
        let r = representative_image(&model, &zs, UnitId::new(1, 0), 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 2]);
        assert!(r.gallery.windows(2).all(|w| w[0] == w[1]));
        let one = model.layer_activation(&zs[0], 1).unwrap();
        for (a, b) in r.mean_map.iter().zip(one.channel(0)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        assert!(representative_image(&model, &zs, UnitId::new(1, 0), 5).is_err());
        assert!(representative_image(&model, &zs, UnitId::new(4, 0), 1).is_err());
    }
}
