//! Trains the artifact/normal/real classifier, explains artifact generations
//! with GradCAM and scores units against those learned masks.

use unitsurgeon::explain::{gradcam_mask, ArtifactClass};
use unitsurgeon::genmodel::LatentCode;
use unitsurgeon::identify::{gradcam_samples, DEFAULT_TAU, DEFAULT_THETA};
use unitsurgeon::imageio::{overlay_heatmap, rgb_png};
use unitsurgeon::workbench::pipeline::{
    build_classifier, load_or_build_fixture, recovered, score_layers, split_latents, ClassifierPipelineConfig, FixtureConfig,
};

fn main() -> unitsurgeon::Result<()> {
    let dir = std::env::temp_dir().join("unitsurgeon-examples");
    let f = load_or_build_fixture(&FixtureConfig::default(), &dir)?;
    let model = &f.planted.model;
    let truth: Vec<usize> = f.planted.ground_truth.iter().map(|u| u.unit).collect();

    let (clf, report) = build_classifier(&f.planted, &f.reals, &ClassifierPipelineConfig::default(), 3)?;
    println!(
        "classifier: holdout accuracy {:.3}, artifact vs normal {:.3}",
        report.holdout_accuracy, report.artifact_vs_normal_accuracy
    );

    let (art, _) = split_latents(&f.planted, 100, 0);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let reference: Vec<LatentCode> = (0..200).map(|s| LatentCode::from_seed(500_000 + s, model.latent_dim())).collect();
    let samples = gradcam_samples(model, &clf, &zs, 2, DEFAULT_THETA)?;
    let (_, tables) = score_layers(model, &reference, &samples, 2, DEFAULT_TAU, Some(DEFAULT_THETA))?;
    println!("top 16 by GradCAM DS: {:?}", &tables[&2].ranking()[..16]);
    println!("recovered {}/8 planted units in the top 16", recovered(&tables[&2], &truth, 16));

    let img = model.image(&zs[0])?;
    let mask = gradcam_mask(&clf, &img, ArtifactClass::Artifact, 2, DEFAULT_THETA)?;
    let [_, h, w] = img.shape();
    let path = dir.join("gradcam_overlay.png");
    std::fs::write(&path, rgb_png(&overlay_heatmap(&img, &mask.resized(h, w), 0.5))?)?;
    println!("wrote {}", path.display());
    Ok(())
}
