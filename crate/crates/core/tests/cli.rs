mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use unitsurgeon::workbench::cli::execute;
use unitsurgeon::workbench::manifest::{file_sha256, RunManifest};
use unitsurgeon::workbench::workspace::{save_images, Workspace};

fn run(root: &Path, args: &[&str]) -> Value {
    let mut full = vec!["unitsurgeon", "--data", root.to_str().unwrap()];
    full.extend_from_slice(args);
    let v = execute(full.clone()).unwrap_or_else(|e| panic!("{full:?}: {e}"));
    assert_eq!(v["ok"], true);
    v
}

/// Workspace holding the shared fixture's trained pair and reals.
fn seeded(root: &Path) -> Workspace {
    let f = common::fixture();
    let ws = Workspace::new(root);
    std::fs::create_dir_all(ws.path("data")).unwrap();
    save_images(&ws.path(Workspace::reals_path()), &f.reals).unwrap();
    ws.write_archive(&Workspace::generator_path(), &f.base.to_archive().unwrap()).unwrap();
    ws.write_archive(&Workspace::discriminator_path(), &f.discriminator.to_archive().unwrap()).unwrap();
    ws
}

struct Outputs {
    artifact_fid: f64,
    corrected_fid: f64,
    config_hash: String,
    files: BTreeMap<String, String>,
}

fn pipeline(root: &Path) -> Outputs {
    seeded(root);
    run(root, &["plant"]);
    let s = run(root, &["sample", "--count", "400"]);
    assert!(s["artifact"].as_u64().unwrap() > 60);
    run(root, &["train-classifier"]);
    run(root, &["thresholds", "--layers", "1,2"]);
    run(root, &["score-ds", "--layers", "1,2"]);
    let c = run(root, &["correct", "--l", "2", "--n", "20%", "--lambda", "0.9", "--limit", "100"]);
    let config_hash = c["config_hash"].as_str().unwrap().to_string();
    let a = run(root, &["evaluate", "--set-a", "artifact", "--set-b", "reals", "--limit", "100"]);
    let b = run(root, &["evaluate", "--set-a", "corrected", "--set-b", "reals", "--limit", "100"]);
    let mut files = BTreeMap::new();
    for sub in ["models", "tables", "labels", &format!("corrected/{config_hash}")] {
        for e in std::fs::read_dir(root.join(sub)).unwrap() {
            let p = e.unwrap().path();
            files.insert(p.strip_prefix(root).unwrap().display().to_string(), file_sha256(&p).unwrap());
        }
    }
    Outputs {
        artifact_fid: a["fid"].as_f64().unwrap(),
        corrected_fid: b["fid"].as_f64().unwrap(),
        config_hash,
        files,
    }
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(d1.path());
    assert!(
        first.corrected_fid < first.artifact_fid,
        "corrected {} vs artifact {}",
        first.corrected_fid,
        first.artifact_fid
    );
    RunManifest::load(d1.path()).unwrap().unwrap().verify(d1.path()).unwrap();

    let second = pipeline(d2.path());
    assert_eq!(first.config_hash, second.config_hash);
    assert_eq!(first.files, second.files);

    let ws = Workspace::new(d1.path());
    let prov = ws.provenance(ws.samples().unwrap().artifact_seeds()[0], &first.config_hash).unwrap();
    assert_eq!(prov.config_hash, first.config_hash);

    let same = run(d1.path(), &["evaluate", "--set-a", "normal", "--set-b", "normal", "--limit", "60"]);
    assert!(same["fid"].as_f64().unwrap().abs() < 1e-6);
}

#[test]
fn zero_budget_correction_reproduces_sample_png() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    seeded(root);
    run(root, &["plant"]);
    run(root, &["sample", "--count", "120"]);
    run(root, &["thresholds", "--layers", "1,2,3"]);
    run(root, &["score-ds", "--layers", "1,2,3"]);
    let ws = Workspace::new(root);
    let seeds = ws.samples().unwrap().artifact_seeds();
    let list: Vec<String> = seeds.iter().take(5).map(|s| s.to_string()).collect();
    for mode in ["zero", "soft"] {
        let c = run(root, &["correct", "--mode", mode, "--l", "3", "--n", "0", "--seeds", &list.join(",")]);
        let hash = c["config_hash"].as_str().unwrap();
        for s in seeds.iter().take(5) {
            let original = file_sha256(&ws.path(Workspace::sample_png_path(*s))).unwrap();
            let corrected = file_sha256(&ws.path(Workspace::corrected_path(*s, hash, "png"))).unwrap();
            assert_eq!(original, corrected, "seed {s} mode {mode}");
        }
    }
}

#[test]
fn oracle_scoring_surfaces_planted_units() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    seeded(root);
    let p = run(root, &["plant"]);
    let planted: Vec<u64> = p["units"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    run(root, &["sample", "--count", "300"]);
    run(root, &["thresholds", "--layers", "2"]);
    let s = run(root, &["score-ds", "--layers", "2"]);
    let top: Vec<u64> = s["top_units"]["2"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    let hits = top.iter().take(8).filter(|u| planted.contains(u)).count();
    assert!(hits >= 7, "top {top:?} planted {planted:?}");
}

#[test]
fn binary_reports_errors_as_json() {
    let bin = env!("CARGO_BIN_EXE_unitsurgeon");
    let dir = tempfile::tempdir().unwrap();

    let out = Command::new(bin).args(["correct", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");

    let out = Command::new(bin).args(["--data", dir.path().to_str().unwrap(), "plant"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["ok"], false);
    assert_eq!(err["error"]["kind"], "not_found");

    let out = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("score-ds"));
}

#[test]
fn run_seed_conflict_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    execute(["unitsurgeon", "--data", root, "--seed", "3", "gen-data", "--count", "4"]).unwrap();
    let err = execute(["unitsurgeon", "--data", root, "--seed", "4", "gen-data", "--count", "4"]).unwrap_err();
    assert_eq!(err.kind(), "config");
}
