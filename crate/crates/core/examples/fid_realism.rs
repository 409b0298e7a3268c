//! FID and realism scores on hand-built embeddings: identical sets, shifted
//! Gaussians and a few outliers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use unitsurgeon::metrics::{evaluate, fid, fid_from_summaries, realism_scores, GaussianSummary};

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f32) -> Vec<Vec<f32>> {
    let g = Normal::new(0.0f32, 1.0).unwrap();
    (0..n).map(|_| (0..d).map(|_| g.sample(rng) + shift).collect()).collect()
}

fn main() -> unitsurgeon::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reals = cloud(&mut rng, 1000, 8, 0.0);
    println!("fid(reals, reals) = {:.2e}", fid(&reals, &reals)?);
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let fake = cloud(&mut rng, 500, 8, shift);
        println!("shift {shift}: FID {:.3} (mean term alone {:.1})", fid(&fake, &reals)?, 8.0 * shift * shift);
    }

    let a = GaussianSummary::from_moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0])?;
    let b = GaussianSummary::from_moments(vec![3.0, 0.0], vec![4.0, 0.0, 0.0, 1.0])?;
    println!("closed form, means 3 apart, std 1 vs 2: {:.4} (exact 10)", fid_from_summaries(&a, &b)?);

    let mut samples = cloud(&mut rng, 5, 8, 0.0);
    samples.push(vec![6.0; 8]);
    let r = realism_scores(&samples, &reals, 3)?;
    println!("realism of 5 in-distribution samples and one outlier: {r:.2?}");
    let report = evaluate(&samples, &reals, "synthetic")?;
    println!("mean realism {:.3} over {} samples", report.mean_realism, report.size_a);
    Ok(())
}
