//! Builds a small workspace through the CLI commands and serves the labelling
//! and correction API on it.
//!
//! cargo run --example serve [-- ADDR]
//! curl 'http://127.0.0.1:8787/api/queue?rater=ana&limit=3'
//! curl 'http://127.0.0.1:8787/api/units?layer=2'
//! curl -X POST -d '{"latent_seed":0,"mode":"soft","l":2,"n":0.2,"lambda":0.9}' \
//!      http://127.0.0.1:8787/api/correct -o corrected.png

use std::sync::Arc;

use unitsurgeon::workbench::cli::execute;
use unitsurgeon::workbench::pipeline::{load_or_build_fixture, FixtureConfig};
use unitsurgeon::workbench::service::{serve, AppState};
use unitsurgeon::workbench::workspace::{save_images, Workspace};

#[tokio::main]
async fn main() -> unitsurgeon::Result<()> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8787".into());
    let tmp = std::env::temp_dir();
    let f = load_or_build_fixture(&FixtureConfig::default(), &tmp.join("unitsurgeon-examples"))?;

    let root = tmp.join(format!("unitsurgeon-serve-{}", std::process::id()));
    let ws = Workspace::new(&root);
    std::fs::create_dir_all(ws.path("data"))?;
    save_images(&ws.path(Workspace::reals_path()), &f.reals)?;
    ws.write_archive(&Workspace::generator_path(), &f.base.to_archive()?)?;
    ws.write_archive(&Workspace::discriminator_path(), &f.discriminator.to_archive()?)?;
    let data = root.to_str().unwrap();
    for args in [vec!["plant"], vec!["sample", "--count", "200"], vec!["thresholds", "--layers", "1,2"], vec!["score-ds", "--layers", "1,2"]] {
        let mut full = vec!["unitsurgeon", "--data", data];
        full.extend(args);
        println!("{}", execute(full)?);
    }

    println!("serving {} on http://{addr}", root.display());
    serve(Arc::new(AppState::load(ws)?), &addr).await
}
