use serde::{Deserialize, Serialize};

use crate::correct::{correct, CorrectionConfig, CorrectionMode, LayerTables, UnitBudget};
use crate::error::{ensure, Error, Result};
use crate::genmodel::{GeneratorModel, LatentCode};
use crate::mask::ExplanationMask;
use crate::tensor::Tensor3;

use super::{evaluate, Embedder};

pub type SweepPoint = CorrectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: CorrectionMode,
    pub l: usize,
    pub n: UnitBudget,
    pub lambda: f32,
    pub fid: f64,
    pub mean_realism: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub uncorrected_fid: f64,
    pub uncorrected_realism: f64,
    pub rows: Vec<SweepRow>,
    pub embedder_id: String,
    pub sample_count: usize,
}

fn budget_label(n: &UnitBudget) -> String {
    match n {
        UnitBudget::Fraction(f) => format!("{f}"),
        UnitBudget::Count { count } => format!("{count}u"),
    }
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "l", "n", "lambda", "fid", "mean_realism"])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.mode.to_string(),
                r.l.to_string(),
                budget_label(&r.n),
                r.lambda.to_string(),
                format!("{:.6}", r.fid),
                format!("{:.6}", r.mean_realism),
            ])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Corrects every artifact latent at each grid point and evaluates the
/// result against the real embeddings. `masks` (aligned with `latents`) are
/// needed only for local-mode points.
pub fn sweep_report(
    model: &GeneratorModel,
    latents: &[LatentCode],
    tables: &LayerTables,
    grid: &[SweepPoint],
    masks: Option<&[ExplanationMask]>,
    reals: &[Vec<f32>],
    embedder: &dyn Embedder,
) -> Result<SweepReport> {
    ensure!(!grid.is_empty(), Config, "sweep grid is empty");
    ensure!(!latents.is_empty(), InvalidInput, "no latents to correct");
    if let Some(m) = masks {
        ensure!(m.len() == latents.len(), InvalidInput, "masks and latents differ in count");
    }
    let id = embedder.embedder_id();
    let base: Vec<Vec<f32>> = latents
        .iter()
        .map(|z| embedder.embed_image(&model.image(z)?))
        .collect::<Result<_>>()?;
    let base_eval = evaluate(&base, reals, &id)?;
    let mut rows = Vec::with_capacity(grid.len());
    for point in grid {
        if point.mode == CorrectionMode::Local {
            ensure!(masks.is_some(), Config, "local grid points need masks");
        }
        let emb = latents
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let img = correct(model, z, tables, point, masks.map(|m| &m[i]))?;
                embedder.embed_image(&img)
            })
            .collect::<Result<Vec<_>>>()?;
        let e = evaluate(&emb, reals, &id)?;
        rows.push(SweepRow {
            mode: point.mode,
            l: point.l,
            n: point.n,
            lambda: point.lambda,
            fid: e.fid,
            mean_realism: e.mean_realism,
        });
    }
    Ok(SweepReport {
        uncorrected_fid: base_eval.fid,
        uncorrected_realism: base_eval.mean_realism,
        rows,
        embedder_id: id,
        sample_count: latents.len(),
    })
}

/// Bar chart of FID per grid point, with the uncorrected FID as a
/// horizontal line.
pub fn render_sweep_plot(report: &SweepReport) -> Tensor3 {
    let (h, bar, gap, pad) = (160usize, 12usize, 4usize, 8usize);
    let w = pad * 2 + report.rows.len().max(1) * (bar + gap);
    let mut img = Tensor3::zeros(3, h, w);
    img.data_mut().fill(1.0);
    let max = report
        .rows
        .iter()
        .map(|r| r.fid)
        .chain([report.uncorrected_fid])
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let plot_h = (h - 2 * pad) as f64;
    let y_of = |v: f64| h - pad - ((v / max) * plot_h).round() as usize;
    let put = |img: &mut Tensor3, y: usize, x: usize, rgb: [f32; 3]| {
        for (c, v) in rgb.iter().enumerate() {
            img.channel_mut(c)[y * w + x] = *v;
        }
    };
    for (i, r) in report.rows.iter().enumerate() {
        let x0 = pad + i * (bar + gap);
        let color = match r.mode {
            CorrectionMode::Zero => [0.35, 0.35, 0.35],
            CorrectionMode::Soft => [0.2, 0.4, 0.8],
            CorrectionMode::Local => [0.2, 0.65, 0.3],
        };
        for y in y_of(r.fid)..h - pad {
            for x in x0..x0 + bar {
                put(&mut img, y, x, color);
            }
        }
    }
    let yb = y_of(report.uncorrected_fid).min(h - pad - 1);
    for x in pad / 2..w - pad / 2 {
        put(&mut img, yb, x, [0.85, 0.1, 0.1]);
    }
    for x in pad / 2..w - pad / 2 {
        put(&mut img, h - pad, x, [0.0, 0.0, 0.0]);
    }
    img
}
