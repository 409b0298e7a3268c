use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::genmodel::Discriminator;
use crate::tensor::Tensor3;

/// Normalised histogram over shared bin edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DValueStats {
    pub normal: Histogram,
    pub artifact: Histogram,
    pub normal_mean: f64,
    pub artifact_mean: f64,
    /// `Σ_i min(p_i, q_i)` over the shared bins.
    pub overlap: f64,
}

fn histograms(a: &[f64], b: &[f64], bins: usize) -> (Histogram, Histogram) {
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let bins = if hi > lo { bins } else { 1 };
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let hist = |xs: &[f64]| {
        let mut c = vec![0usize; bins];
        for x in xs {
            let i = (((x - lo) / width).floor() as usize).min(bins - 1);
            c[i] += 1;
        }
        Histogram {
            edges: edges.clone(),
            density: c.iter().map(|v| *v as f64 / xs.len() as f64).collect(),
            count: xs.len(),
        }
    };
    (hist(a), hist(b))
}

/// Histogram-intersection overlap of two samples on `bins` shared bins.
pub fn overlap_coefficient(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), InvalidInput, "both samples must be non-empty");
    ensure!(bins >= 1, Config, "need at least one bin");
    let (ha, hb) = histograms(a, b, bins);
    Ok(ha.density.iter().zip(&hb.density).map(|(p, q)| p.min(*q)).sum::<f64>().min(1.0))
}

pub fn dvalue_stats(disc: &Discriminator, normal: &[Tensor3], artifact: &[Tensor3], bins: usize) -> Result<DValueStats> {
    ensure!(!normal.is_empty() && !artifact.is_empty(), InvalidInput, "both image sets must be non-empty");
    ensure!(bins >= 1, Config, "need at least one bin");
    let dv = |set: &[Tensor3]| set.iter().map(|i| disc.d_value(i).map(f64::from)).collect::<Result<Vec<_>>>();
    let (n, a) = (dv(normal)?, dv(artifact)?);
    let (hn, ha) = histograms(&n, &a, bins);
    let overlap = hn.density.iter().zip(&ha.density).map(|(p, q)| p.min(*q)).sum::<f64>().min(1.0);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(DValueStats {
        normal_mean: mean(&n),
        artifact_mean: mean(&a),
        normal: hn,
        artifact: ha,
        overlap,
    })
}
