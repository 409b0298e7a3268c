//! Trains a short toy GAN on the shapes dataset, plants a magenta-blob
//! artifact into eight layer-2 units and writes a sample grid.
//!
//! cargo run --example train_and_plant [-- OUT_DIR]

use unitsurgeon::data::shapes_dataset;
use unitsurgeon::genmodel::{plant_artifact_units, train_toy_pair, LatentCode, PlantSpec, TrainConfig};
use unitsurgeon::imageio::{grid, rgb_png};

fn main() -> unitsurgeon::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("unitsurgeon-examples"));
    std::fs::create_dir_all(&out)?;

    let reals = shapes_dataset(1000, 7);
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let (base, _disc, report) = train_toy_pair(&reals, &cfg, 7)?;
    println!(
        "trained {} steps, final D loss {:.3}, G loss {:.3}",
        report.steps,
        report.discriminator_loss.last().unwrap(),
        report.generator_loss.last().unwrap()
    );

    let units = PlantSpec::random_units(&base, 2, 8, 1)?.units;
    let spec = PlantSpec {
        units,
        ..PlantSpec::default()
    };
    let planted = plant_artifact_units(&base, &spec, 8)?;
    println!("planted units {:?} (precursors {:?})", spec.units, planted.precursors);

    let zs: Vec<LatentCode> = (0..32).map(|s| LatentCode::from_seed(s, base.latent_dim())).collect();
    let plant = planted.model.plant().unwrap();
    let triggered = (0..2000).filter(|s| plant.is_triggered(&LatentCode::from_seed(*s, base.latent_dim()))).count();
    println!("trigger rate {:.3} (configured {})", triggered as f64 / 2000.0, spec.trigger_fraction);

    let images = zs.iter().map(|z| planted.model.image(z)).collect::<unitsurgeon::Result<Vec<_>>>()?;
    let path = out.join("planted_samples.png");
    std::fs::write(&path, rgb_png(&grid(&images, 8))?)?;
    println!("wrote {}", path.display());
    Ok(())
}
