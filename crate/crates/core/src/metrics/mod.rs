//! Embedding-based evaluation: Fréchet distance, per-sample realism scores
//! and correction sweeps.

mod sweep;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::explain::FeatureExtractor;
use crate::tensor::Tensor3;

pub use sweep::{render_sweep_plot, sweep_report, SweepPoint, SweepReport, SweepRow};

/// Diagonal loading added to both covariances before the matrix square root.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;
pub const REALISM_K: usize = 3;
pub const REALISM_CAP: f64 = 1e6;

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    /// Identifies the embedding space; numbers are comparable only within one id.
    fn embedder_id(&self) -> String;
    fn embed_image(&self, image: &Tensor3) -> Result<Vec<f32>>;
}

impl Embedder for FeatureExtractor {
    fn embedder_id(&self) -> String {
        format!("toy-extractor-{}", &self.checksum()[..16])
    }

    fn embed_image(&self, image: &Tensor3) -> Result<Vec<f32>> {
        self.embed(image)
    }
}

pub fn embed(images: &[Tensor3], embedder: &dyn Embedder) -> Result<Vec<Vec<f32>>> {
    if let Some(first) = images.first() {
        ensure!(
            images.iter().all(|i| i.shape() == first.shape()),
            InvalidInput,
            "images must share one resolution"
        );
    }
    images.iter().map(|i| embedder.embed_image(i)).collect()
}

/// Mean and (symmetrised, unbiased) covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn from_embeddings(features: &[Vec<f32>]) -> Result<Self> {
        ensure!(!features.is_empty(), InvalidInput, "embedding set is empty");
        let d = features[0].len();
        ensure!(
            d > 0 && features.iter().all(|f| f.len() == d),
            InvalidInput,
            "embeddings must share a positive dimension"
        );
        ensure!(
            features.iter().flatten().all(|v| v.is_finite()),
            InvalidInput,
            "embeddings must be finite"
        );
        let n = features.len();
        let mut mean = vec![0.0f64; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0f64; d * d];
        if n > 1 {
            for f in features {
                for i in 0..d {
                    let di = f[i] as f64 - mean[i];
                    for j in i..d {
                        cov[i * d + j] += di * (f[j] as f64 - mean[j]);
                    }
                }
            }
            for i in 0..d {
                for j in i..d {
                    let v = cov[i * d + j] / (n - 1) as f64;
                    cov[i * d + j] = v;
                    cov[j * d + i] = v;
                }
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    /// Summary from explicit moments; the covariance is symmetrised.
    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        ensure!(d > 0 && cov.len() == d * d, InvalidInput, "covariance must be {d}x{d}");
        let m = DMatrix::from_row_slice(d, d, &cov);
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self {
            mean,
            cov: sym.transpose().as_slice().to_vec(),
            count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(ΣaΣb)^{1/2})` with `εI` added to both
/// covariances.
///
/// `tr((ΣaΣb)^{1/2})` is computed as `Σ √λ` over the eigenvalues of the
/// symmetric matrix `S Σb S`, `S = Σa^{1/2}`, which is similar to `ΣaΣb`.
pub fn fid_with_shrinkage(a: &GaussianSummary, b: &GaussianSummary, eps: f64) -> Result<f64> {
    ensure!(a.dim() == b.dim(), InvalidInput, "summary dimensions differ: {} vs {}", a.dim(), b.dim());
    let d = a.dim();
    let shrink = DMatrix::<f64>::identity(d, d) * eps;
    let sa = a.cov_matrix() + &shrink;
    let sb = b.cov_matrix() + &shrink;
    let root_a = psd_sqrt(&sa);
    let mid = &root_a * &sb * &root_a;
    let mid = (&mid + mid.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(mid).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

pub fn fid_from_summaries(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    fid_with_shrinkage(a, b, COVARIANCE_SHRINKAGE)
}

pub fn fid(set_a: &[Vec<f32>], set_b: &[Vec<f32>]) -> Result<f64> {
    fid_from_summaries(&GaussianSummary::from_embeddings(set_a)?, &GaussianSummary::from_embeddings(set_b)?)
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Distance from each real feature to its `k`-th nearest other real feature.
pub fn knn_radii(reals: &[Vec<f32>], k: usize) -> Result<Vec<f64>> {
    ensure!(k >= 1, Config, "k must be >= 1");
    ensure!(k < reals.len(), Config, "k = {k} needs more than {k} real samples, got {}", reals.len());
    Ok(reals
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut d: Vec<f64> = reals
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| distance(r, o))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect())
}

/// `R(x) = max_r radius_k(r) / ‖x − r‖`, capped at [`REALISM_CAP`].
pub fn realism_scores(samples: &[Vec<f32>], reals: &[Vec<f32>], k: usize) -> Result<Vec<f64>> {
    let radii = knn_radii(reals, k)?;
    Ok(samples
        .iter()
        .map(|x| {
            reals
                .iter()
                .zip(&radii)
                .map(|(r, rad)| {
                    let d = distance(x, r);
                    if *rad == 0.0 {
                        0.0
                    } else if d == 0.0 {
                        REALISM_CAP
                    } else {
                        (rad / d).min(REALISM_CAP)
                    }
                })
                .fold(0.0f64, f64::max)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub mean_realism: f64,
    pub realism: Vec<f64>,
    pub size_a: usize,
    pub size_b: usize,
    pub embedder_id: String,
}

/// FID of `samples` against `reals` plus realism scores of each sample.
pub fn evaluate(samples: &[Vec<f32>], reals: &[Vec<f32>], embedder_id: &str) -> Result<EvalReport> {
    let fid = fid(samples, reals)?;
    let realism = realism_scores(samples, reals, REALISM_K)?;
    let mean_realism = realism.iter().sum::<f64>() / realism.len().max(1) as f64;
    Ok(EvalReport {
        fid,
        mean_realism,
        realism,
        size_a: samples.len(),
        size_b: reals.len(),
        embedder_id: embedder_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cloud(n: usize, d: usize, shift: f32, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0f32, 1.0).unwrap();
        (0..n)
            .map(|i| (0..d).map(|j| g.sample(&mut rng) * (1.0 + j as f32 * 0.3) + shift + (i % 3) as f32 * 0.1).collect())
            .collect()
    }

    #[test]
    fn fid_of_a_set_with_itself_is_zero() {
        let x = cloud(80, 6, 0.0, 1);
        assert!(fid(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn fid_unit_gaussians_one_apart() {
        let a = GaussianSummary::from_moments(vec![0.0], vec![1.0]).unwrap();
        let b = GaussianSummary::from_moments(vec![1.0], vec![1.0]).unwrap();
        assert!((fid_from_summaries(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fid_is_symmetric_and_translation_invariant() {
        let a = cloud(60, 5, 0.0, 2);
        let b = cloud(70, 5, 0.7, 3);
        let ab = fid(&a, &b).unwrap();
        assert!((ab - fid(&b, &a).unwrap()).abs() <= 1e-8);
        let shift = |s: &[Vec<f32>]| -> Vec<Vec<f32>> {
            s.iter().map(|v| v.iter().enumerate().map(|(j, x)| x + 0.25 * j as f32).collect()).collect()
        };
        assert!((ab - fid(&shift(&a), &shift(&b)).unwrap()).abs() <= 1e-8 * ab.max(1.0) + 1e-6);
    }

    #[test]
    fn empty_or_mismatched_sets_are_rejected() {
        assert!(fid(&[], &cloud(4, 2, 0.0, 0)).is_err());
        assert!(fid(&cloud(4, 3, 0.0, 0), &cloud(4, 2, 0.0, 0)).is_err());
    }

    #[test]
    fn realism_hand_computed_five_points() {
        // reals on a unit square plus its centre; k = 1
        let reals = vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![2.0, 2.0],
            vec![1.0, 1.0],
        ];
        let r = knn_radii(&reals, 1).unwrap();
        let s2 = 2f64.sqrt();
        for v in &r {
            assert!((v - s2).abs() < 1e-12);
        }
        // sample at (3, 1): nearest reals (2,0),(2,2) at √2 → ratio 1;
        // centre at distance 2 → √2/2
        let out = realism_scores(&[vec![3.0, 1.0], vec![1.0, 1.0], vec![11.0, 1.0]], &reals, 1).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert_eq!(out[1], REALISM_CAP);
        assert!((out[2] - s2 / 82f64.sqrt()).abs() < 1e-12);
        assert!(realism_scores(&[vec![0.0, 0.0]], &reals, 5).is_err());
    }

    #[test]
    fn realism_vanishes_far_away() {
        let reals = cloud(10, 3, 0.0, 5);
        let far = vec![vec![1e6f32; 3]];
        assert!(realism_scores(&far, &reals, 3).unwrap()[0] < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn realism_is_permutation_invariant(seed in 0u64..1000, rot in 0usize..8) {
            let reals = cloud(9, 3, 0.0, seed);
            let samples = cloud(4, 3, 0.5, seed + 1);
            let base = realism_scores(&samples, &reals, 3).unwrap();
            let mut r2 = reals.clone();
            r2.rotate_left(rot);
            let mut s2 = samples.clone();
            s2.reverse();
            let mut moved = realism_scores(&s2, &r2, 3).unwrap();
            moved.reverse();
            prop_assert_eq!(base, moved);
        }
    }
}
