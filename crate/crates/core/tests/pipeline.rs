mod common;

use proptest::prelude::*;

use unitsurgeon::archive::TensorArchive;
use unitsurgeon::correct::{local_correct, CorrectionConfig, CorrectionMode, LayerTables, UnitBudget};
use unitsurgeon::data::{noise_images, shapes_dataset};
use unitsurgeon::explain::{gradcam_mask, predict, ArtifactClass};
use unitsurgeon::genmodel::LatentCode;
use unitsurgeon::identify::{fid_rank_units, oracle_samples, DEFAULT_TAU, DEFAULT_THETA};
use unitsurgeon::mask::{BinaryMask, ExplanationMask};
use unitsurgeon::metrics::{fid, GaussianSummary};
use unitsurgeon::tensor::Tensor3;
use unitsurgeon::workbench::pipeline::{score_layers, split_latents};

fn oracle_tables() -> LayerTables {
    let f = common::fixture();
    let model = &f.planted.model;
    let (art, _) = split_latents(&f.planted, 100, 0);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let reference: Vec<LatentCode> = (0..200).map(|s| LatentCode::from_seed(500_000 + s, model.latent_dim())).collect();
    score_layers(model, &reference, &oracle_samples(&f.planted.oracle(), &zs), 2, DEFAULT_TAU, None).unwrap().1
}

/// Per pixel, how far the colour leans towards magenta.
fn magenta(img: &Tensor3) -> Vec<f32> {
    let [_, h, w] = img.shape();
    let d = img.data();
    (0..h * w).map(|p| 0.5 * (d[p] + d[2 * h * w + p]) - d[h * w + p]).collect()
}

fn mean_where(values: &[f32], mask: &BinaryMask, inside: bool) -> f64 {
    let picked: Vec<f64> = values.iter().zip(&mask.bits).filter(|(_, b)| **b == inside).map(|(v, _)| *v as f64).collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}

#[test]
fn trigger_fraction_matches_configuration() {
    let f = common::fixture();
    let plant = f.planted.model.plant().unwrap();
    let n = 2000;
    let hit = (0..n)
        .filter(|s| plant.is_triggered(&LatentCode::from_seed(*s, f.planted.model.latent_dim())))
        .count();
    let rate = hit as f64 / n as f64;
    assert!((rate - 0.3).abs() <= 0.05, "trigger rate {rate}");
}

#[test]
fn generated_images_are_closer_to_reals_than_noise() {
    let f = common::fixture();
    let ex = common::classifier().0.extractor();
    let emb = |imgs: &[Tensor3]| imgs.iter().map(|i| ex.embed(i).unwrap()).collect::<Vec<_>>();
    let reals = emb(&f.reals[..500]);
    let generated: Vec<Tensor3> = (0..300)
        .map(|s| f.base.image(&LatentCode::from_seed(s, f.base.latent_dim())).unwrap())
        .collect();
    let g = fid(&emb(&generated), &reals).unwrap();
    let n = fid(&emb(&noise_images(300, 5)), &reals).unwrap();
    assert!(g < n, "generated {g} noise {n}");
}

#[test]
fn classifier_recognises_fresh_reals() {
    let clf = &common::classifier().0;
    let fresh = shapes_dataset(400, 424_242);
    let real = fresh.iter().filter(|i| predict(clf, i).unwrap() == ArtifactClass::Real).count();
    assert!(real as f64 / 400.0 >= 0.8, "{real}/400 predicted real");
}

#[test]
fn gradcam_mass_sits_on_the_blob() {
    let f = common::fixture();
    let clf = &common::classifier().0;
    let oracle = f.planted.oracle();
    let (art, _) = split_latents(&f.planted, 60, 10_000);
    let mut wins = 0;
    for (_, z) in &art {
        let img = f.planted.model.image(z).unwrap();
        let m = gradcam_mask(clf, &img, ArtifactClass::Artifact, 2, DEFAULT_THETA).unwrap();
        let truth = oracle.mask(z);
        let values = m.resized(truth.height, truth.width);
        if mean_where(&values, &truth, true) > mean_where(&values, &truth, false) {
            wins += 1;
        }
    }
    assert!(wins >= 54, "inside beat outside on {wins}/60");
}

#[test]
fn fid_ranking_favours_planted_units() {
    let f = common::fixture();
    let model = &f.planted.model;
    let ex = common::classifier().0.extractor();
    let reals: Vec<Vec<f32>> = f.reals[..500].iter().map(|i| ex.embed(i).unwrap()).collect();
    let summary = GaussianSummary::from_embeddings(&reals).unwrap();
    let zs: Vec<LatentCode> = (0..200).map(|s| LatentCode::from_seed(3_000_000 + s, model.latent_dim())).collect();
    let table = fid_rank_units(model, &zs, &summary, ex, 2, 20).unwrap();
    let ranking = table.ranking();
    let truth: Vec<usize> = f.planted.ground_truth.iter().map(|u| u.unit).collect();
    let planted_mean = truth.iter().map(|u| ranking.iter().position(|r| r == u).unwrap()).sum::<usize>() as f64 / truth.len() as f64;
    let chance = (ranking.len() - 1) as f64 / 2.0;
    assert!(planted_mean < chance, "planted mean rank {planted_mean}, chance {chance}");
}

#[test]
fn local_correction_stays_inside_the_mask() {
    let f = common::fixture();
    let model = &f.planted.model;
    let tables = oracle_tables();
    let oracle = f.planted.oracle();
    let cfg = CorrectionConfig {
        mode: CorrectionMode::Local,
        l: 2,
        n: UnitBudget::Fraction(0.2),
        lambda: 0.9,
    };
    let [_, h, w] = model.image_shape();
    let (art, _) = split_latents(&f.planted, 30, 20_000);
    let mut wins = 0;
    for (_, z) in &art {
        let truth = oracle.mask(z);
        let mask = ExplanationMask::new(truth.height, truth.width, truth.as_f32(), None).unwrap();
        let before = model.image(z).unwrap();
        let after = local_correct(model, z, &mask, &tables, &cfg).unwrap();
        let change: Vec<f32> = (0..h * w)
            .map(|p| (0..3).map(|c| (before.data()[c * h * w + p] - after.data()[c * h * w + p]).abs()).sum())
            .collect();
        let region = truth.resample(h, w);
        if mean_where(&change, &region, true) > mean_where(&change, &region, false) {
            wins += 1;
        }
    }
    assert!(wins >= 27, "inside changed more on {wins}/30");
}

#[test]
fn triggered_generations_show_a_magenta_blob() {
    let f = common::fixture();
    let model = &f.planted.model;
    let (art, norm) = split_latents(&f.planted, 200, 30_000);
    let peak = |set: &[(u64, LatentCode)]| -> Vec<f32> {
        set.iter()
            .map(|(_, z)| magenta(&model.image(z).unwrap()).into_iter().fold(f32::MIN, f32::max))
            .collect()
    };
    let mut normal = peak(&norm);
    normal.sort_by(f32::total_cmp);
    let cut = normal[(0.95 * normal.len() as f64) as usize];
    let visible = peak(&art).iter().filter(|p| **p > cut).count();
    assert!(visible as f64 / 200.0 >= 0.8, "{visible}/200 artifact generations above the normal 95th percentile {cut}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn archive_round_trip(
        arrays in prop::collection::vec(
            (prop::collection::vec(1usize..5, 1..4), any::<u64>()),
            1..5,
        ),
        tag in "[a-z]{0,8}",
    ) {
        let mut a = TensorArchive::new(serde_json::json!({"tag": tag}));
        for (i, (shape, seed)) in arrays.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|j| f32::from_bits((seed.wrapping_add(j as u64) as u32) & 0x7f7f_ffff)).collect();
            a.push(format!("a{i}"), shape, data).unwrap();
        }
        let bytes = a.to_bytes().unwrap();
        let b = TensorArchive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&b.meta, &a.meta);
        prop_assert_eq!(b.arrays().len(), a.arrays().len());
        for (x, y) in a.arrays().iter().zip(b.arrays()) {
            prop_assert_eq!(&x.name, &y.name);
            prop_assert_eq!(&x.shape, &y.shape);
            prop_assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        prop_assert_eq!(b.to_bytes().unwrap(), bytes);
    }
}
