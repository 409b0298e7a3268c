#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use unitsurgeon::archive::TensorArchive;
use unitsurgeon::explain::{ClassifierModel, ClassifierReport};
use unitsurgeon::workbench::pipeline::{build_classifier, load_or_build_fixture, ClassifierPipelineConfig, Fixture, FixtureConfig};

pub const CLASSIFIER_SEED: u64 = 3;

pub fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("unitsurgeon-cache")
}

/// The default planted fixture, trained once per cache directory.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| load_or_build_fixture(&FixtureConfig::default(), &cache_dir()).expect("fixture"))
}

/// Classifier for [`fixture`], cached next to it.
pub fn classifier() -> &'static (ClassifierModel, ClassifierReport) {
    static C: OnceLock<(ClassifierModel, ClassifierReport)> = OnceLock::new();
    C.get_or_init(|| {
        let key = FixtureConfig::default().cache_key();
        let dir = cache_dir().join(format!("classifier-{key}-{CLASSIFIER_SEED}"));
        let (a, r) = (dir.join("classifier.ust"), dir.join("report.json"));
        if a.exists() && r.exists() {
            let model = ClassifierModel::from_archive(&TensorArchive::read(&a).unwrap()).unwrap();
            let report = serde_json::from_slice(&std::fs::read(&r).unwrap()).unwrap();
            return (model, report);
        }
        let f = fixture();
        let out = build_classifier(&f.planted, &f.reals, &ClassifierPipelineConfig::default(), CLASSIFIER_SEED).unwrap();
        let tmp = cache_dir().join(format!(".classifier-{key}-{}", std::process::id()));
        std::fs::create_dir_all(&tmp).unwrap();
        out.0.to_archive().unwrap().write(&tmp.join("classifier.ust")).unwrap();
        std::fs::write(tmp.join("report.json"), serde_json::to_vec(&out.1).unwrap()).unwrap();
        if std::fs::rename(&tmp, &dir).is_err() {
            let _ = std::fs::remove_dir_all(&tmp);
        }
        out
    })
}
