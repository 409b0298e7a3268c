//! Sweeps correction settings over modes, depths and unit budgets, then
//! writes the sweep as CSV and a bar chart.

use unitsurgeon::correct::{CorrectionConfig, CorrectionMode, UnitBudget};
use unitsurgeon::genmodel::LatentCode;
use unitsurgeon::identify::{oracle_samples, DEFAULT_TAU};
use unitsurgeon::imageio::rgb_png;
use unitsurgeon::metrics::{render_sweep_plot, sweep_report};
use unitsurgeon::explain::FeatureExtractor;
use unitsurgeon::workbench::pipeline::{load_or_build_fixture, score_layers, split_latents, FixtureConfig};

fn main() -> unitsurgeon::Result<()> {
    let dir = std::env::temp_dir().join("unitsurgeon-examples");
    let f = load_or_build_fixture(&FixtureConfig::default(), &dir)?;
    let model = &f.planted.model;
    let (art, _) = split_latents(&f.planted, 100, 0);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let reference: Vec<LatentCode> = (0..200).map(|s| LatentCode::from_seed(500_000 + s, model.latent_dim())).collect();
    let (_, tables) = score_layers(model, &reference, &oracle_samples(&f.planted.oracle(), &zs), 2, DEFAULT_TAU, None)?;

    let mut grid = Vec::new();
    for mode in [CorrectionMode::Zero, CorrectionMode::Soft] {
        for l in [1, 2] {
            for n in [0.0, 0.1, 0.2, 0.5] {
                grid.push(CorrectionConfig {
                    mode,
                    l,
                    n: UnitBudget::Fraction(n),
                    lambda: 0.9,
                });
            }
        }
    }
    let embedder = FeatureExtractor::toy(11);
    let reals: Vec<Vec<f32>> = f.reals[..500].iter().map(|i| embedder.embed(i)).collect::<unitsurgeon::Result<_>>()?;
    let (test, _) = split_latents(&f.planted, 100, 2_000_000);
    let test: Vec<LatentCode> = test.into_iter().map(|(_, z)| z).collect();
    let report = sweep_report(model, &test, &tables, &grid, None, &reals, &embedder)?;

    print!("{}", report.to_csv()?);
    std::fs::write(dir.join("sweep.csv"), report.to_csv()?)?;
    std::fs::write(dir.join("sweep.png"), rgb_png(&render_sweep_plot(&report))?)?;
    println!("uncorrected FID {:.3}; wrote sweep.csv and sweep.png to {}", report.uncorrected_fid, dir.display());
    Ok(())
}
