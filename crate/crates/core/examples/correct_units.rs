//! Corrects artifact generations by suppressing the highest-scoring units,
//! comparing FID against reals before and after for each mode.

use unitsurgeon::correct::{correct, CorrectionConfig, CorrectionMode, UnitBudget};
use unitsurgeon::genmodel::LatentCode;
use unitsurgeon::identify::{oracle_samples, DEFAULT_TAU};
use unitsurgeon::mask::ExplanationMask;
use unitsurgeon::metrics::fid;
use unitsurgeon::explain::FeatureExtractor;
use unitsurgeon::workbench::pipeline::{load_or_build_fixture, score_layers, split_latents, FixtureConfig};

fn main() -> unitsurgeon::Result<()> {
    let f = load_or_build_fixture(&FixtureConfig::default(), &std::env::temp_dir().join("unitsurgeon-examples"))?;
    let model = &f.planted.model;
    let oracle = f.planted.oracle();

    let (art, _) = split_latents(&f.planted, 100, 0);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let reference: Vec<LatentCode> = (0..200).map(|s| LatentCode::from_seed(500_000 + s, model.latent_dim())).collect();
    let (_, tables) = score_layers(model, &reference, &oracle_samples(&oracle, &zs), 2, DEFAULT_TAU, None)?;

    let embedder = FeatureExtractor::toy(11);
    let reals: Vec<Vec<f32>> = f.reals[..500].iter().map(|i| embedder.embed(i)).collect::<unitsurgeon::Result<_>>()?;
    let (test, _) = split_latents(&f.planted, 200, 2_000_000);
    let plain: Vec<Vec<f32>> = test.iter().map(|(_, z)| embedder.embed(&model.image(z)?)).collect::<unitsurgeon::Result<_>>()?;
    println!("uncorrected artifact FID {:.3}", fid(&plain, &reals)?);

    for mode in [CorrectionMode::Zero, CorrectionMode::Soft, CorrectionMode::Local] {
        let cfg = CorrectionConfig {
            mode,
            l: 2,
            n: UnitBudget::Fraction(0.2),
            lambda: 0.9,
        };
        let fixed: Vec<Vec<f32>> = test
            .iter()
            .map(|(_, z)| {
                let m = oracle.mask(z);
                let mask = ExplanationMask::new(m.height, m.width, m.as_f32(), None)?;
                embedder.embed(&correct(model, z, &tables, &cfg, Some(&mask))?)
            })
            .collect::<unitsurgeon::Result<_>>()?;
        println!("{mode:>5}: corrected FID {:.3}", fid(&fixed, &reals)?);
    }
    Ok(())
}
