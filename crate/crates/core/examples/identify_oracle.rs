//! Scores layer-2 units by defective score against the planted blob's
//! ground-truth masks and checks the planted units come out on top.
//!
//! The trained fixture is cached under the system temp directory.

use unitsurgeon::genmodel::LatentCode;
use unitsurgeon::identify::{oracle_samples, DEFAULT_TAU};
use unitsurgeon::workbench::pipeline::{load_or_build_fixture, recovered, score_layers, split_latents, FixtureConfig};

fn main() -> unitsurgeon::Result<()> {
    let f = load_or_build_fixture(&FixtureConfig::default(), &std::env::temp_dir().join("unitsurgeon-examples"))?;
    let model = &f.planted.model;
    let truth: Vec<usize> = f.planted.ground_truth.iter().map(|u| u.unit).collect();

    let (art, _) = split_latents(&f.planted, 100, 0);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let reference: Vec<LatentCode> = (0..200).map(|s| LatentCode::from_seed(500_000 + s, model.latent_dim())).collect();
    let samples = oracle_samples(&f.planted.oracle(), &zs);
    let (thresholds, tables) = score_layers(model, &reference, &samples, 2, DEFAULT_TAU, None)?;

    println!("layer 2 thresholds (first 4): {:?}", &thresholds[1].thresholds[..4]);
    for s in tables[&2].sorted().iter().take(10) {
        let mark = if truth.contains(&s.unit) { "planted" } else { "" };
        println!("unit {:>2}  DS {:.3}  normalized {:.3}  {mark}", s.unit, s.raw, s.normalized);
    }
    println!("recovered {}/8 planted units in the top 8", recovered(&tables[&2], &truth, 8));
    Ok(())
}
