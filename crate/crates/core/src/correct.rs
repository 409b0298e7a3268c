//! Unit selection and the three correction modes: zero ablation, sequential
//! soft ablation and mask-weighted local correction.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::genmodel::{GeneratorModel, InterventionPlan, LatentCode, UnitId, UnitWeight};
use crate::identify::UnitScoreTable;
use crate::mask::ExplanationMask;
use crate::tensor::{bilinear_resize, Tensor3};

/// Score tables keyed by layer index.
pub type LayerTables = BTreeMap<usize, UnitScoreTable>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    #[serde(alias = "zero-sequential")]
    Zero,
    #[serde(alias = "soft-sequential")]
    Soft,
    #[serde(alias = "local-sequential")]
    Local,
}

impl FromStr for CorrectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "zero-sequential" => Ok(Self::Zero),
            "soft" | "soft-sequential" => Ok(Self::Soft),
            "local" | "local-sequential" => Ok(Self::Local),
            other => Err(Error::InvalidInput(format!("unknown correction mode {other}"))),
        }
    }
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Soft => "soft",
            Self::Local => "local",
        })
    }
}

/// Units to touch per layer: a fraction of `D_l` (floored) or a fixed count.
///
/// In JSON a bare number is a fraction and `{"count": k}` a count. As a
/// string, `"20%"` and `"0.2"` are fractions and an integer above 1 is a
/// count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UnitBudget {
    Fraction(f64),
    Count { count: usize },
}

impl UnitBudget {
    pub fn resolve(&self, units: usize) -> usize {
        match *self {
            Self::Fraction(f) => ((f * units as f64) + 1e-9).floor() as usize,
            Self::Count { count } => count,
        }
        .min(units)
    }
}

impl FromStr for UnitBudget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("cannot read unit budget {s:?}"));
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.trim().parse().map_err(|_| bad())?;
            return Ok(Self::Fraction(v / 100.0));
        }
        let v: f64 = s.trim().parse().map_err(|_| bad())?;
        if v <= 1.0 {
            Ok(Self::Fraction(v))
        } else if v.fract() == 0.0 {
            Ok(Self::Count { count: v as usize })
        } else {
            Err(bad())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub mode: CorrectionMode,
    /// Stopping layer: interventions cover layers `1..=l`.
    pub l: usize,
    pub n: UnitBudget,
    pub lambda: f32,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            mode: CorrectionMode::Soft,
            l: 2,
            n: UnitBudget::Fraction(0.2),
            lambda: 0.9,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self, model: &GeneratorModel) -> Result<()> {
        ensure!(
            self.l >= 1 && self.l < model.output_layer(),
            Config,
            "stopping layer must lie in 1..={}, got {}",
            model.output_layer() - 1,
            self.l
        );
        if let UnitBudget::Fraction(f) = self.n {
            ensure!((0.0..=1.0).contains(&f), Config, "unit fraction must lie in [0, 1], got {f}");
        }
        ensure!((0.0..=1.0).contains(&self.lambda), Config, "lambda must lie in [0, 1], got {}", self.lambda);
        Ok(())
    }
}

/// Selected units of one layer with their normalised scores, highest raw
/// score first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSelection {
    pub layer: usize,
    pub units: Vec<(usize, f64)>,
}

impl UnitSelection {
    pub fn ids(&self) -> Vec<UnitId> {
        self.units.iter().map(|(u, _)| UnitId::new(self.layer, *u)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

pub fn select_top_units(table: &UnitScoreTable, n: UnitBudget) -> UnitSelection {
    let k = n.resolve(table.units.len());
    UnitSelection {
        layer: table.layer,
        units: table
            .ranking()
            .into_iter()
            .take(k)
            .map(|u| (u, table.units[u].normalized))
            .collect(),
    }
}

/// Zeroes the selected units of a single layer.
pub fn zero_ablate(model: &GeneratorModel, z: &LatentCode, selection: &UnitSelection) -> Result<Tensor3> {
    model.forward_with_interventions(z, &InterventionPlan::zero_units(selection.ids())?)
}

fn check_tables(model: &GeneratorModel, tables: &LayerTables, config: &CorrectionConfig) -> Result<()> {
    config.validate(model)?;
    for layer in 1..=config.l {
        let t = tables
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no score table for layer {layer}")))?;
        let units = model.layer(layer).expect("validated").units;
        ensure!(
            t.layer == layer && t.units.len() == units,
            Config,
            "score table for layer {layer} does not match the model"
        );
    }
    Ok(())
}

/// Selections for layers `1..=l` in layer order.
pub fn selections(model: &GeneratorModel, tables: &LayerTables, config: &CorrectionConfig) -> Result<Vec<UnitSelection>> {
    check_tables(model, tables, config)?;
    Ok((1..=config.l).map(|k| select_top_units(&tables[&k], config.n)).collect())
}

/// Scalar plan: `λ(1 − DS̃)` per selected unit (or 0 in zero mode).
pub fn sequential_plan(model: &GeneratorModel, tables: &LayerTables, config: &CorrectionConfig) -> Result<InterventionPlan> {
    let mut plan = InterventionPlan::new();
    for sel in selections(model, tables, config)? {
        for (u, ds) in &sel.units {
            let w = match config.mode {
                CorrectionMode::Zero => 0.0,
                _ => (config.lambda as f64 * (1.0 - ds)) as f32,
            };
            plan.insert(UnitId::new(sel.layer, *u), UnitWeight::Scalar(w.clamp(0.0, 1.0)))?;
        }
    }
    Ok(plan)
}

/// Map plan: `1 − mask` resampled to each layer's resolution.
pub fn local_plan(
    model: &GeneratorModel,
    mask: &ExplanationMask,
    tables: &LayerTables,
    config: &CorrectionConfig,
) -> Result<InterventionPlan> {
    let [_, h, w] = model.image_shape();
    ensure!(
        mask.height == h && mask.width == w,
        InvalidInput,
        "mask is {}x{}, images are {h}x{w}",
        mask.height,
        mask.width
    );
    let mut plan = InterventionPlan::new();
    for sel in selections(model, tables, config)? {
        let spec = model.layer(sel.layer).expect("validated");
        let down = bilinear_resize(&mask.values, h, w, spec.height, spec.width);
        let weight: Vec<f32> = down.iter().map(|m| (1.0 - m).clamp(0.0, 1.0)).collect();
        for (u, _) in &sel.units {
            plan.insert(UnitId::new(sel.layer, *u), UnitWeight::Map(weight.clone()))?;
        }
    }
    Ok(plan)
}

pub fn sequential_correct(
    model: &GeneratorModel,
    z: &LatentCode,
    tables: &LayerTables,
    config: &CorrectionConfig,
) -> Result<Tensor3> {
    ensure!(
        config.mode != CorrectionMode::Local,
        Config,
        "local mode needs a mask; use local_correct"
    );
    model.forward_with_interventions(z, &sequential_plan(model, tables, config)?)
}

pub fn local_correct(
    model: &GeneratorModel,
    z: &LatentCode,
    mask: &ExplanationMask,
    tables: &LayerTables,
    config: &CorrectionConfig,
) -> Result<Tensor3> {
    model.forward_with_interventions(z, &local_plan(model, mask, tables, config)?)
}

/// Dispatches on `config.mode`; `mask` is required in local mode.
pub fn correct(
    model: &GeneratorModel,
    z: &LatentCode,
    tables: &LayerTables,
    config: &CorrectionConfig,
    mask: Option<&ExplanationMask>,
) -> Result<Tensor3> {
    match config.mode {
        CorrectionMode::Local => {
            let m = mask.ok_or_else(|| Error::Config("local mode needs an explanation mask".into()))?;
            local_correct(model, z, m, tables, config)
        }
        _ => sequential_correct(model, z, tables, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::GeneratorArch;
    use proptest::prelude::*;

    fn table(layer: usize, raw: Vec<f64>) -> UnitScoreTable {
        UnitScoreTable::from_raw(layer, raw, "t".into(), 1, 0.005, Some(0.5))
    }

    fn fixture() -> (GeneratorModel, LayerTables) {
        let model = GeneratorModel::new(GeneratorArch::default(), 7).unwrap();
        let mut tables = LayerTables::new();
        for l in 1..=3 {
            let units = model.layer(l).unwrap().units;
            tables.insert(l, table(l, (0..units).map(|u| ((u * 37 + l) % 11) as f64 / 10.0).collect()));
        }
        (model, tables)
    }

    #[test]
    fn selection_order_and_budget() {
        let t = table(1, vec![0.5, 0.9, 0.5]);
        let s = select_top_units(&t, UnitBudget::Count { count: 2 });
        assert_eq!(s.units.iter().map(|u| u.0).collect::<Vec<_>>(), vec![1, 0]);
        assert!(select_top_units(&t, UnitBudget::Fraction(0.0)).is_empty());
        let all = select_top_units(&t, UnitBudget::Fraction(1.0));
        assert_eq!(all.units.iter().map(|u| u.0).collect::<Vec<_>>(), vec![1, 0, 2]);
        assert_eq!(UnitBudget::Fraction(0.2).resolve(48), 9);
        assert_eq!(UnitBudget::Fraction(0.2).resolve(32), 6);
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("20%".parse::<UnitBudget>().unwrap(), UnitBudget::Fraction(0.2));
        assert_eq!("0".parse::<UnitBudget>().unwrap(), UnitBudget::Fraction(0.0));
        assert_eq!("5".parse::<UnitBudget>().unwrap(), UnitBudget::Count { count: 5 });
        assert!("2.5".parse::<UnitBudget>().is_err());
        let c: CorrectionConfig = serde_json::from_str(r#"{"mode":"soft-sequential","l":2,"n":0.2,"lambda":0.9}"#).unwrap();
        assert_eq!(c, CorrectionConfig::default());
    }

    #[test]
    fn lambda_zero_equals_iterated_zero_ablation() {
        let (model, tables) = fixture();
        let cfg = CorrectionConfig {
            lambda: 0.0,
            l: 3,
            ..CorrectionConfig::default()
        };
        let ids: Vec<UnitId> = selections(&model, &tables, &cfg).unwrap().iter().flat_map(|s| s.ids()).collect();
        let zero_plan = InterventionPlan::zero_units(ids).unwrap();
        for seed in 0..5 {
            let z = LatentCode::from_seed(seed, 32);
            assert_eq!(
                sequential_correct(&model, &z, &tables, &cfg).unwrap(),
                model.forward_with_interventions(&z, &zero_plan).unwrap()
            );
        }
    }

    #[test]
    fn empty_budget_and_zero_mask_are_identity() {
        let (model, tables) = fixture();
        let z = LatentCode::from_seed(3, 32);
        let plain = model.image(&z).unwrap();
        let none = CorrectionConfig {
            n: UnitBudget::Fraction(0.0),
            ..CorrectionConfig::default()
        };
        assert_eq!(sequential_correct(&model, &z, &tables, &none).unwrap(), plain);
        let local = CorrectionConfig {
            mode: CorrectionMode::Local,
            ..CorrectionConfig::default()
        };
        let zero = ExplanationMask::zeros(32, 32);
        assert_eq!(local_correct(&model, &z, &zero, &tables, &local).unwrap(), plain);
        // λ = 1 with every selected score normalised to 0
        let mut flat = LayerTables::new();
        for l in 1..=2 {
            flat.insert(l, table(l, vec![0.4; model.layer(l).unwrap().units]));
        }
        let unit = CorrectionConfig {
            lambda: 1.0,
            ..CorrectionConfig::default()
        };
        assert_eq!(sequential_correct(&model, &z, &flat, &unit).unwrap(), plain);
    }

    #[test]
    fn full_mask_equals_zero_ablation_of_selection() {
        let (model, tables) = fixture();
        let z = LatentCode::from_seed(4, 32);
        let cfg = CorrectionConfig {
            mode: CorrectionMode::Local,
            ..CorrectionConfig::default()
        };
        let zero = CorrectionConfig {
            mode: CorrectionMode::Zero,
            ..CorrectionConfig::default()
        };
        assert_eq!(
            local_correct(&model, &z, &ExplanationMask::ones(32, 32), &tables, &cfg).unwrap(),
            sequential_correct(&model, &z, &tables, &zero).unwrap()
        );
    }

    #[test]
    fn soft_weight_arithmetic() {
        let model = GeneratorModel::new(GeneratorArch::default(), 7).unwrap();
        let mut tables = LayerTables::new();
        let mut raw = vec![0.0; 32];
        raw[3] = 1.0;
        raw[5] = 0.5;
        tables.insert(1, table(1, raw));
        let cfg = CorrectionConfig {
            l: 1,
            n: UnitBudget::Count { count: 2 },
            lambda: 0.9,
            ..CorrectionConfig::default()
        };
        let plan = sequential_plan(&model, &tables, &cfg).unwrap();
        let w: Vec<(UnitId, UnitWeight)> = plan.entries().map(|(u, w)| (*u, w.clone())).collect();
        assert_eq!(w[0], (UnitId::new(1, 3), UnitWeight::Scalar(0.0)));
        assert_eq!(w[1], (UnitId::new(1, 5), UnitWeight::Scalar(0.45)));
        // a unit value of 2.0 scaled by 0.45 is 0.9
        assert!((2.0f32 * 0.45 - 0.9).abs() < 1e-7);
    }

    #[test]
    fn config_validation() {
        let (model, tables) = fixture();
        let z = LatentCode::from_seed(0, 32);
        for bad in [
            CorrectionConfig { l: 0, ..Default::default() },
            CorrectionConfig { l: 4, ..Default::default() },
            CorrectionConfig { lambda: 1.5, ..Default::default() },
            CorrectionConfig { n: UnitBudget::Fraction(2.0), ..Default::default() },
        ] {
            assert!(matches!(sequential_correct(&model, &z, &tables, &bad), Err(Error::Config(_))));
        }
        let mut missing = tables.clone();
        missing.remove(&1);
        assert!(matches!(
            sequential_correct(&model, &z, &missing, &CorrectionConfig::default()),
            Err(Error::Config(_))
        ));
        let local = CorrectionConfig { mode: CorrectionMode::Local, ..Default::default() };
        assert!(local_correct(&model, &z, &ExplanationMask::zeros(16, 16), &tables, &local).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]
        #[test]
        fn smaller_lambda_never_grows_selected_units(lo in 0.0f32..1.0, hi in 0.0f32..1.0, seed in 0u64..50) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let (model, tables) = fixture();
            let z = LatentCode::from_seed(seed, 32);
            let run = |lambda: f32| {
                let cfg = CorrectionConfig { l: 1, lambda, ..Default::default() };
                let plan = sequential_plan(&model, &tables, &cfg).unwrap();
                model.forward_recorded(&z, &plan).unwrap().1
            };
            let (a, b) = (run(lo), run(hi));
            let cfg = CorrectionConfig { l: 1, ..Default::default() };
            for (u, _) in &select_top_units(&tables[&1], cfg.n).units {
                let ma = a.layer(1).unwrap().channel(*u);
                let mb = b.layer(1).unwrap().channel(*u);
                for (x, y) in ma.iter().zip(mb) {
                    prop_assert!(x.abs() <= y.abs());
                }
            }
        }

        #[test]
        fn local_mode_leaves_unselected_units_alone(seed in 0u64..50) {
            let (model, tables) = fixture();
            let z = LatentCode::from_seed(seed, 32);
            let vals: Vec<f32> = (0..1024).map(|i| ((i * 7919 + seed as usize) % 101) as f32 / 100.0).collect();
            let mask = ExplanationMask::new(32, 32, vals, None).unwrap();
            let cfg = CorrectionConfig { mode: CorrectionMode::Local, l: 1, ..Default::default() };
            let plan = local_plan(&model, &mask, &tables, &cfg).unwrap();
            let (_, got) = model.forward_recorded(&z, &plan).unwrap();
            let (_, plain) = model.generate(&z, true).unwrap();
            let plain = plain.unwrap();
            let picked: Vec<usize> = select_top_units(&tables[&1], cfg.n).units.iter().map(|u| u.0).collect();
            for u in 0..32 {
                if !picked.contains(&u) {
                    prop_assert_eq!(got.layer(1).unwrap().channel(u), plain.layer(1).unwrap().channel(u));
                }
            }
        }
    }
}
