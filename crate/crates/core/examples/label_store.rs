//! Appends ratings from two raters to a JSONL label store, rejects a duplicate
//! and partitions generations by majority vote.

use unitsurgeon::workbench::labels::{Label, LabelRecord, LabelStore};

fn main() -> unitsurgeon::Result<()> {
    let dir = std::env::temp_dir().join(format!("unitsurgeon-labels-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("labels.jsonl");
    let mut store = LabelStore::open(&path)?;

    let votes = [(1, "ana", Label::Artifact), (1, "bo", Label::Artifact), (2, "ana", Label::Artifact), (2, "bo", Label::Normal), (3, "ana", Label::Normal)];
    for (seed, rater, label) in votes {
        store.append(LabelRecord::new(format!("gen-{seed}"), seed, label, rater))?;
    }
    match store.append(LabelRecord::new("gen-1", 1, Label::Normal, "ana")) {
        Err(e) => println!("duplicate rejected: {e}"),
        Ok(()) => unreachable!(),
    }

    let reopened = LabelStore::open(&path)?;
    let p = reopened.partition();
    println!("{} records; artifact seeds {:?}, normal seeds {:?} (ties count as normal)", reopened.len(), p.artifact, p.normal);
    print!("{}", std::fs::read_to_string(&path)?);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
