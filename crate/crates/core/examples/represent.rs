//! Finds the generations that most activate a planted unit and a control
//! unit, and renders each unit's representative image.

use unitsurgeon::genmodel::{LatentCode, UnitId};
use unitsurgeon::identify::representative_image;
use unitsurgeon::imageio::rgb_png;
use unitsurgeon::workbench::pipeline::{load_or_build_fixture, FixtureConfig};

fn main() -> unitsurgeon::Result<()> {
    let dir = std::env::temp_dir().join("unitsurgeon-examples");
    let f = load_or_build_fixture(&FixtureConfig::default(), &dir)?;
    let model = &f.planted.model;
    let zs: Vec<LatentCode> = (0..300).map(|s| LatentCode::from_seed(s, model.latent_dim())).collect();
    let plant = model.plant().unwrap();

    let planted = f.planted.ground_truth.iter().next().unwrap().unit;
    let control = (0..model.layer(2).unwrap().units).find(|u| !f.planted.ground_truth.iter().any(|g| g.unit == *u)).unwrap();
    for unit in [planted, control] {
        let r = representative_image(model, &zs, UnitId::new(2, unit), 8)?;
        let blobs = r.indices.iter().filter(|i| plant.is_triggered(&zs[**i])).count();
        let path = dir.join(format!("unit-2-{unit}.png"));
        std::fs::write(&path, rgb_png(&r.render(4))?)?;
        println!("unit {unit}: top magnitudes {:.2?}, {blobs}/8 triggered, wrote {}", &r.magnitudes[..3], path.display());
    }
    Ok(())
}
