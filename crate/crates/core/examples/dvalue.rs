//! Shows that the discriminator's output barely separates artifact from
//! normal generations.

use unitsurgeon::genmodel::LatentCode;
use unitsurgeon::identify::dvalue_stats;
use unitsurgeon::tensor::Tensor3;
use unitsurgeon::workbench::pipeline::{load_or_build_fixture, split_latents, FixtureConfig};

fn main() -> unitsurgeon::Result<()> {
    let f = load_or_build_fixture(&FixtureConfig::default(), &std::env::temp_dir().join("unitsurgeon-examples"))?;
    let model = &f.planted.model;
    let (art, norm) = split_latents(&f.planted, 300, 0);
    let images = |set: &[(u64, LatentCode)]| set.iter().map(|(_, z)| model.image(z)).collect::<unitsurgeon::Result<Vec<Tensor3>>>();
    let s = dvalue_stats(&f.discriminator, &images(&norm)?, &images(&art)?, 20)?;

    println!("mean D(x): normal {:.3}, artifact {:.3}", s.normal_mean, s.artifact_mean);
    println!("histogram overlap {:.3}", s.overlap);
    for (i, (p, q)) in s.normal.density.iter().zip(&s.artifact.density).enumerate() {
        println!("{:>6.2} {:<30} {}", s.normal.edges[i], "#".repeat((p * 60.0) as usize), "*".repeat((q * 60.0) as usize));
    }
    Ok(())
}
