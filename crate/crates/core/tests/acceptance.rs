//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unitsurgeon::correct::{
    local_correct, selections, sequential_correct, CorrectionConfig, CorrectionMode, LayerTables, UnitBudget,
};
use unitsurgeon::explain::{gradcam, gradcam_mask, ArtifactClass, ClassifierModel, ExplanationMask, FeatureExtractor};
use unitsurgeon::genmodel::{GeneratorModel, LatentCode, LayerParams};
use unitsurgeon::identify::{
    defective_scores_from_activations, dvalue_stats, gradcam_samples, oracle_samples, quantile_threshold, unit_iou,
    DEFAULT_TAU, DEFAULT_THETA,
};
use unitsurgeon::mask::BinaryMask;
use unitsurgeon::metrics::{fid, fid_from_summaries, fid_with_shrinkage, sweep_report, GaussianSummary, COVARIANCE_SHRINKAGE};
use unitsurgeon::nn::{ConvBlock, ConvStack};
use unitsurgeon::tensor::Tensor3;
use unitsurgeon::workbench::pipeline::{build_classifier, recovered, score_layers, split_latents, ClassifierPipelineConfig};

const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const LEARNED_BUDGET: Duration = Duration::from_secs(600);
const MIN_FID_DROP: f64 = 0.10;
const MAX_NORMAL_CHANGE: f64 = 0.05;
const FID_TOL: f64 = 1e-6;
const GRADCAM_REL_TOL: f64 = 1e-4;
const MIN_OVERLAP: f64 = 0.1;
const ARTIFACT_SCORING: usize = 100;
const REFERENCE: usize = 200;
const CORRECTION_SET: usize = 500;
const CAM_LAYER: usize = 2;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn reference(model: &GeneratorModel) -> Vec<LatentCode> {
    (0..REFERENCE as u64).map(|s| LatentCode::from_seed(500_000 + s, model.latent_dim())).collect()
}

fn oracle_recovery() -> (Outcome, LayerTables) {
    let f = common::fixture();
    let model = &f.planted.model;
    let truth: Vec<usize> = f.planted.ground_truth.iter().map(|u| u.unit).collect();
    let t = Instant::now();
    let (art, _) = split_latents(&f.planted, ARTIFACT_SCORING, 0);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let samples = oracle_samples(&f.planted.oracle(), &zs);
    let (_, tables) = score_layers(model, &reference(model), &samples, 2, DEFAULT_TAU, None).unwrap();
    let hit = recovered(&tables[&2], &truth, 8);
    let took = t.elapsed();
    let out = Outcome {
        name: "planted-unit recovery, oracle masks",
        pass: hit == 8 && took < ORACLE_BUDGET,
        detail: format!("{hit}/8 in top 8, scoring took {:.1}s (budget {}s)", took.as_secs_f64(), ORACLE_BUDGET.as_secs()),
    };
    (out, tables)
}

fn learned_recovery() -> (Outcome, ClassifierModel, LayerTables) {
    let f = common::fixture();
    let model = &f.planted.model;
    let truth: Vec<usize> = f.planted.ground_truth.iter().map(|u| u.unit).collect();
    let t = Instant::now();
    let (clf, report) = build_classifier(&f.planted, &f.reals, &ClassifierPipelineConfig::default(), common::CLASSIFIER_SEED).unwrap();
    let (art, _) = split_latents(&f.planted, ARTIFACT_SCORING, 0);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let samples = gradcam_samples(model, &clf, &zs, CAM_LAYER, DEFAULT_THETA).unwrap();
    let (_, tables) = score_layers(model, &reference(model), &samples, 2, DEFAULT_TAU, Some(DEFAULT_THETA)).unwrap();
    let hit = recovered(&tables[&2], &truth, 16);
    let took = t.elapsed();
    let out = Outcome {
        name: "planted-unit recovery, GradCAM masks",
        pass: hit >= 7 && took < LEARNED_BUDGET,
        detail: format!(
            "{hit}/8 in top 16, classifier artifact-vs-normal accuracy {:.3}, took {:.1}s (budget {}s)",
            report.artifact_vs_normal_accuracy,
            took.as_secs_f64(),
            LEARNED_BUDGET.as_secs()
        ),
    };
    (out, clf, tables)
}

fn correction_direction(clf: &ClassifierModel, tables: &LayerTables) -> Outcome {
    let f = common::fixture();
    let model = &f.planted.model;
    let ex = clf.extractor();
    let reals: Vec<Vec<f32>> = f.reals.iter().take(1000).map(|i| ex.embed(i).unwrap()).collect();
    let cfg = CorrectionConfig {
        mode: CorrectionMode::Soft,
        l: 2,
        n: UnitBudget::Fraction(0.2),
        lambda: 0.9,
    };
    let (art, norm) = split_latents(&f.planted, CORRECTION_SET, 2_000_000);
    let emb = |set: &[(u64, LatentCode)], corrected: bool| -> Vec<Vec<f32>> {
        set.iter()
            .map(|(_, z)| {
                let img = if corrected { sequential_correct(model, z, tables, &cfg).unwrap() } else { model.image(z).unwrap() };
                ex.embed(&img).unwrap()
            })
            .collect()
    };
    let (fa, fac) = (fid(&emb(&art, false), &reals).unwrap(), fid(&emb(&art, true), &reals).unwrap());
    let (fnn, fnc) = (fid(&emb(&norm, false), &reals).unwrap(), fid(&emb(&norm, true), &reals).unwrap());
    let drop = (fa - fac) / fa;
    let change = (fnc - fnn).abs() / fnn;
    Outcome {
        name: "correction direction (l=2, n=20%, lambda=0.9)",
        pass: drop >= MIN_FID_DROP && change < MAX_NORMAL_CHANGE,
        detail: format!(
            "artifact FID {fa:.3} -> {fac:.3} ({:.1}% drop, need >= {:.0}%), normal FID {fnn:.3} -> {fnc:.3} ({:.1}% change, need < {:.0}%)",
            100.0 * drop,
            100.0 * MIN_FID_DROP,
            100.0 * change,
            100.0 * MAX_NORMAL_CHANGE
        ),
    }
}

/// Copy of `model` whose listed units have zero incoming weights and bias,
/// so they output exactly zero after the activation.
fn weight_ablated(model: &GeneratorModel, units: &[(usize, usize)]) -> GeneratorModel {
    let mut params: Vec<LayerParams> = model.params().to_vec();
    for &(layer, unit) in units {
        let row = params[layer].weight.len() / params[layer].bias.len();
        params[layer].weight[unit * row..(unit + 1) * row].fill(0.0);
        params[layer].bias[unit] = 0.0;
    }
    GeneratorModel::from_parameters(model.arch().clone(), params).unwrap()
}

fn reductions(tables: &LayerTables) -> Outcome {
    let f = common::fixture();
    let (base, planted) = (&f.base, &f.planted.model);
    let mut checked = 0;
    let mut ok = true;
    for l in 1..=2 {
        for n in [0.1, 0.2, 0.5] {
            let cfg = CorrectionConfig {
                mode: CorrectionMode::Soft,
                l,
                n: UnitBudget::Fraction(n),
                lambda: 0.0,
            };
            let ids: Vec<(usize, usize)> = selections(base, tables, &cfg)
                .unwrap()
                .iter()
                .flat_map(|s| s.units.iter().map(|(u, _)| (s.layer, *u)).collect::<Vec<_>>())
                .collect();
            let ablated = weight_ablated(base, &ids);
            for s in 0..10 {
                let z = LatentCode::from_seed(7_000 + s, base.latent_dim());
                ok &= sequential_correct(base, &z, tables, &cfg).unwrap() == ablated.image(&z).unwrap();
                checked += 1;
            }
        }
    }
    for s in 0..20 {
        let z = LatentCode::from_seed(8_000 + s, planted.latent_dim());
        let plain = planted.image(&z).unwrap();
        for mode in [CorrectionMode::Soft, CorrectionMode::Zero] {
            let cfg = CorrectionConfig {
                mode,
                n: UnitBudget::Fraction(0.0),
                ..CorrectionConfig::default()
            };
            ok &= sequential_correct(planted, &z, tables, &cfg).unwrap() == plain;
            checked += 1;
        }
        let local = CorrectionConfig {
            mode: CorrectionMode::Local,
            ..CorrectionConfig::default()
        };
        let [_, h, w] = planted.image_shape();
        ok &= local_correct(planted, &z, &ExplanationMask::zeros(h, w), tables, &local).unwrap() == plain;
        checked += 1;
    }
    Outcome {
        name: "correction reductions (exact equality)",
        pass: ok,
        detail: format!("{checked} comparisons: lambda=0 vs weight-zeroed model, n=0 and all-zero local mask vs plain"),
    }
}

/// `tr((A B)^{1/2})` by Denman-Beavers iteration on the non-symmetric product.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a * b;
    let n = m.nrows();
    let (mut y, mut z) = (m.clone(), DMatrix::<f64>::identity(n, n));
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let y2 = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
        let delta = (&y2 - &y).norm();
        y = y2;
        if delta < 1e-15 * y.norm() {
            break;
        }
    }
    y.trace()
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::<f64>::identity(d, d) * 0.2
}

fn fid_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x: Vec<Vec<f32>> = (0..200).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let self_fid = fid(&x, &x).unwrap();
    let mut worst_1d = 0.0f64;
    for _ in 0..20 {
        let (m1, m2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (s1, s2): (f64, f64) = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let a = GaussianSummary::from_moments(vec![m1], vec![s1 * s1]).unwrap();
        let b = GaussianSummary::from_moments(vec![m2], vec![s2 * s2]).unwrap();
        let exact = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        worst_1d = worst_1d.max((fid_with_shrinkage(&a, &b, 0.0).unwrap() - exact).abs());
        let e = COVARIANCE_SHRINKAGE;
        let shrunk = (m1 - m2).powi(2) + ((s1 * s1 + e).sqrt() - (s2 * s2 + e).sqrt()).powi(2);
        worst_1d = worst_1d.max((fid_from_summaries(&a, &b).unwrap() - shrunk).abs());
    }
    let mut worst_5d = 0.0f64;
    for _ in 0..10 {
        let (ca, cb) = (random_spd(&mut rng, 5), random_spd(&mut rng, 5));
        let ma: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mb: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = GaussianSummary::from_moments(ma.clone(), ca.transpose().iter().cloned().collect()).unwrap();
        let b = GaussianSummary::from_moments(mb.clone(), cb.transpose().iter().cloned().collect()).unwrap();
        let shrink = DMatrix::<f64>::identity(5, 5) * COVARIANCE_SHRINKAGE;
        let (sa, sb) = (&ca + &shrink, &cb + &shrink);
        let mean: f64 = ma.iter().zip(&mb).map(|(p, q)| (p - q).powi(2)).sum();
        let oracle = mean + sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(&sa, &sb);
        worst_5d = worst_5d.max((fid_from_summaries(&a, &b).unwrap() - oracle).abs());
    }
    Outcome {
        name: "FID oracles",
        pass: self_fid < FID_TOL && worst_1d < FID_TOL && worst_5d < FID_TOL,
        detail: format!("fid(X,X) = {self_fid:.2e}, 1-D worst error {worst_1d:.2e} over 20 draws, 5-D worst error {worst_5d:.2e} vs Denman-Beavers"),
    }
}

// f64 re-implementation of the classifier tail for finite differences.

struct Block64 {
    cin: usize,
    cout: usize,
    pool: bool,
    w: Vec<f64>,
    b: Vec<f64>,
}

fn conv64(x: &[f64], h: usize, w: usize, blk: &Block64) -> Vec<f64> {
    let mut out = vec![0.0; blk.cout * h * w];
    for o in 0..blk.cout {
        for y in 0..h {
            for xx in 0..w {
                let mut s = blk.b[o];
                for i in 0..blk.cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += blk.w[((o * blk.cin + i) * 3 + ky) * 3 + kx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = if s >= 0.0 { s } else { 0.2 * s };
            }
        }
    }
    out
}

fn pool64(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for k in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[(k * h + 2 * y + dy) * w + 2 * xx + dx];
                out[(k * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    out
}

fn score64(blocks: &[Block64], head: &[f64], bias: f64, layer: usize, act: &[f64], mut h: usize, mut w: usize) -> f64 {
    let mut x = act.to_vec();
    let mut c = blocks[layer].cout;
    if blocks[layer].pool {
        x = pool64(&x, c, h, w);
        h /= 2;
        w /= 2;
    }
    for blk in &blocks[layer + 1..] {
        x = conv64(&x, h, w, blk);
        c = blk.cout;
        if blk.pool {
            x = pool64(&x, c, h, w);
            h /= 2;
            w /= 2;
        }
    }
    let feat: Vec<f64> = (0..c).map(|k| x[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
    bias + feat.iter().zip(head).map(|(f, r)| f * r).sum::<f64>()
}

fn gradcam_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for model_seed in 0..3u64 {
        let e = FeatureExtractor::new([2, 8, 8], &[(3, true), (4, false)], 11 + model_seed);
        let d = e.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
        let head: Vec<f32> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = ClassifierModel::new(e, head, [0.1, 0.0, -0.1]).unwrap();
        let blocks: Vec<Block64> = m
            .extractor()
            .stack()
            .blocks
            .iter()
            .map(|b| Block64 {
                cin: b.in_channels,
                cout: b.out_channels,
                pool: b.pool,
                w: b.weight.iter().map(|v| *v as f64).collect(),
                b: b.bias.iter().map(|v| *v as f64).collect(),
            })
            .collect();
        for img_seed in 0..3u64 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + img_seed);
            let img = Tensor3::from_vec(2, 8, 8, (0..128).map(|_| r.random::<f32>()).collect()).unwrap();
            for layer in 0..2 {
                for class in ArtifactClass::ALL {
                    let cam = gradcam(&m, &img, class, layer).unwrap();
                    let row: Vec<f64> = m.head_weight()[class.index() * d..(class.index() + 1) * d].iter().map(|v| *v as f64).collect();
                    let bias = m.head_bias()[class.index()] as f64;
                    let [c, h, w] = cam.activation.shape();
                    let act: Vec<f64> = cam.activation.data().iter().map(|v| *v as f64).collect();
                    let eps = 1e-6;
                    for k in 0..c {
                        let mut total = 0.0;
                        for p in 0..h * w {
                            let (mut plus, mut minus) = (act.clone(), act.clone());
                            plus[k * h * w + p] += eps;
                            minus[k * h * w + p] -= eps;
                            total += (score64(&blocks, &row, bias, layer, &plus, h, w)
                                - score64(&blocks, &row, bias, layer, &minus, h, w))
                                / (2.0 * eps);
                        }
                        let fd = total / (h * w) as f64;
                        let rel = (cam.weights[k] as f64 - fd).abs() / fd.abs().max(1e-3);
                        worst = worst.max(rel);
                        compared += 1;
                    }
                }
            }
        }
    }
    // one channel, centre-tap kernel, positive bias: the map is the activation
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut block = ConvBlock::new(&mut rng, 1, 1, false);
    block.weight = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    block.bias = vec![0.5];
    let stack = ConvStack {
        input_shape: [1, 4, 4],
        blocks: vec![block],
    };
    let m = ClassifierModel::new(FeatureExtractor::from_stack(stack), vec![2.0, 0.0, 0.0], [0.0; 3]).unwrap();
    let img = Tensor3::from_vec(1, 4, 4, (0..16).map(|i| (i as f32 * 0.37).sin().abs()).collect()).unwrap();
    let cam = gradcam(&m, &img, ArtifactClass::Artifact, 0).unwrap();
    let mask = gradcam_mask(&m, &img, ArtifactClass::Artifact, 0, 0.5).unwrap();
    let top = img.data().iter().map(|v| v + 0.5).fold(0.0f32, f32::max);
    let analytic = cam.weights[0] == 2.0 / 16.0
        && mask.values.iter().zip(img.data()).all(|(v, x)| (v - (x + 0.5) / top).abs() <= 1e-6);
    Outcome {
        name: "GradCAM correctness",
        pass: worst < GRADCAM_REL_TOL && analytic,
        detail: format!("{compared} channel weights, worst relative error {worst:.2e} vs f64 finite differences; analytic case {}", if analytic { "exact" } else { "wrong" }),
    }
}

fn iou_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn threshold_iou_ds_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fails = Vec::new();
    for i in 0..100 {
        let n = rng.random_range(1..3000);
        let tau = rng.random_range(0.0001..0.5);
        let discrete = i % 3 == 0;
        let v: Vec<f32> = (0..n)
            .map(|_| if discrete { rng.random_range(0..5) as f32 } else { rng.random_range(-10.0..10.0) })
            .collect();
        let t = quantile_threshold(&v, tau).unwrap();
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut k = 0;
        while ((k + 1) as f64) / (n as f64) <= tau {
            k += 1;
        }
        let above = v.iter().filter(|x| **x > t).count();
        if t != sorted[k] || above > k {
            fails.push(format!("quantile #{i}"));
        }
    }
    for i in 0..200 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let p = rng.random_range(0.0..1.0);
        let a = BinaryMask::from_bits(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap();
        let b = BinaryMask::from_bits(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap();
        let ab = a.iou(&b).unwrap();
        let inv = BinaryMask::from_bits(h, w, a.bits.iter().map(|x| !x).collect()).unwrap();
        let empty = BinaryMask::empty(h, w);
        let ok = (0.0..=1.0).contains(&ab)
            && ab == b.iou(&a).unwrap()
            && ab == iou_oracle(&a.bits, &b.bits)
            && a.iou(&a).unwrap() == if a.is_empty() { 0.0 } else { 1.0 }
            && a.iou(&inv).unwrap() == 0.0
            && empty.iou(&empty).unwrap() == 0.0;
        if !ok {
            fails.push(format!("iou #{i}"));
        }
    }
    for i in 0..50 {
        let (units, h, w) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..9));
        let count = rng.random_range(1..12);
        let acts: Vec<Tensor3> = (0..count)
            .map(|_| Tensor3::from_vec(units, h, w, (0..units * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let masks: Vec<BinaryMask> = (0..count)
            .map(|_| BinaryMask::from_bits(h, w, (0..h * w).map(|_| rng.random_bool(0.3)).collect()).unwrap())
            .collect();
        let thr: Vec<f32> = (0..units).map(|_| rng.random_range(-0.5..0.8)).collect();
        let ds = defective_scores_from_activations(&acts, &masks, &thr).unwrap();
        let mut ok = ds.iter().all(|d| (0.0..=1.0).contains(d));
        for u in 0..units {
            let mean = acts
                .iter()
                .zip(&masks)
                .map(|(a, m)| iou_oracle(&a.channel(u).iter().map(|x| *x > thr[u]).collect::<Vec<_>>(), &m.bits))
                .sum::<f64>()
                / count as f64;
            ok &= (ds[u] - mean).abs() < 1e-12;
            ok &= (unit_iou(acts[0].channel(u), h, w, thr[u], &masks[0]).unwrap()
                - iou_oracle(&acts[0].channel(u).iter().map(|x| *x > thr[u]).collect::<Vec<_>>(), &masks[0].bits))
            .abs()
                < 1e-15;
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.reverse();
        order.rotate_left(count / 2);
        let pa: Vec<Tensor3> = order.iter().map(|j| acts[*j].clone()).collect();
        let pm: Vec<BinaryMask> = order.iter().map(|j| masks[*j].clone()).collect();
        let permuted = defective_scores_from_activations(&pa, &pm, &thr).unwrap();
        ok &= ds.iter().zip(&permuted).all(|(a, b)| (a - b).abs() < 1e-12);
        if !ok {
            fails.push(format!("ds fixture #{i}"));
        }
    }
    Outcome {
        name: "threshold / IoU / DS suite",
        pass: fails.is_empty(),
        detail: if fails.is_empty() {
            "100 quantile distributions, 200 IoU mask pairs, 50 DS fixtures".into()
        } else {
            format!("failures: {}", fails.join(", "))
        },
    }
}

fn sweep_sanity(clf: &ClassifierModel, tables: &LayerTables) -> Outcome {
    let f = common::fixture();
    let model = &f.planted.model;
    let ex = clf.extractor();
    let mut tables = tables.clone();
    // layer 3 joins with any scores: n = 1 selects every unit regardless
    let l3 = model.layer(3).unwrap().units;
    tables.insert(
        3,
        unitsurgeon::identify::UnitScoreTable::from_raw(3, vec![0.0; l3], "none".into(), 1, DEFAULT_TAU, None),
    );
    let (art, _) = split_latents(&f.planted, 200, 3_000_000);
    let zs: Vec<LatentCode> = art.into_iter().map(|(_, z)| z).collect();
    let reals: Vec<Vec<f32>> = f.reals.iter().take(1000).map(|i| ex.embed(i).unwrap()).collect();
    let grid = vec![
        CorrectionConfig {
            mode: CorrectionMode::Zero,
            l: 3,
            n: UnitBudget::Fraction(0.0),
            lambda: 0.9,
        },
        CorrectionConfig {
            mode: CorrectionMode::Zero,
            l: 3,
            n: UnitBudget::Fraction(1.0),
            lambda: 0.9,
        },
    ];
    let r = sweep_report(model, &zs, &tables, &grid, None, &reals, ex).unwrap();
    let (none, all) = (r.rows[0].fid, r.rows[1].fid);
    Outcome {
        name: "sweep sanity (full zero ablation vs n=0)",
        pass: all > none,
        detail: format!("FID at n=0 {none:.3}, at full ablation of layers 1-3 {all:.3}"),
    }
}

fn dvalue_overlap() -> Outcome {
    let f = common::fixture();
    let model = &f.planted.model;
    let (art, norm) = split_latents(&f.planted, 300, 0);
    let imgs = |set: &[(u64, LatentCode)]| -> Vec<Tensor3> { set.iter().map(|(_, z)| model.image(z).unwrap()).collect() };
    let s = dvalue_stats(&f.discriminator, &imgs(&norm), &imgs(&art), 20).unwrap();
    Outcome {
        name: "D-value non-separability",
        pass: s.overlap > MIN_OVERLAP,
        detail: format!(
            "histogram overlap {:.3} (need > {MIN_OVERLAP}), mean D normal {:.3}, artifact {:.3}",
            s.overlap, s.normal_mean, s.artifact_mean
        ),
    }
}

fn main() {
    let t = Instant::now();
    let f = common::fixture();
    println!(
        "fixture ready in {:.1}s (trained or loaded from cache), planted units {:?}",
        t.elapsed().as_secs_f64(),
        f.planted.ground_truth.iter().map(|u| u.unit).collect::<Vec<_>>()
    );
    let mut outcomes = Vec::new();
    let (o, _oracle_tables) = oracle_recovery();
    outcomes.push(o);
    let (o, clf, tables) = learned_recovery();
    outcomes.push(o);
    outcomes.push(correction_direction(&clf, &tables));
    outcomes.push(reductions(&tables));
    outcomes.push(fid_oracles());
    outcomes.push(gradcam_correctness());
    outcomes.push(threshold_iou_ds_suite());
    outcomes.push(sweep_sanity(&clf, &tables));
    outcomes.push(dvalue_overlap());
    for o in &outcomes {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
