//! End-to-end run on mock backends and demo products, in a temp workdir.
//!
//!     cargo run --example quickstart

use recontext::config::parse_config;
use recontext::pipeline::{Pipeline, Stage};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = r#"{
        "seed": 7,
        "products": {"demo": {"count": 3, "images_per_product": 3}},
        "backends": {"mock": true},
        "bank": {"size": 20, "auto_approve": true}
    }"#;
    let pipeline = Pipeline::new(parse_config(config, dir.path())?)?;
    let summary = pipeline.run(&Stage::ALL)?;

    println!("run {}", summary.run_id);
    for (product, ranked) in &summary.ranked {
        println!("{product}: {} ranked -> {}", ranked.len(), ranked.join(", "));
    }
    let table = std::fs::read_to_string(pipeline.run_dir().join("metrics_table.txt"))?;
    println!("\n{table}");

    // Stages can be re-run from recorded prerequisites; manifests only grow.
    let before = summary.content_hashes.values().map(Vec::len).sum::<usize>();
    let again = pipeline.run(&[Stage::Rank, Stage::Report])?;
    let after = again.content_hashes.values().map(Vec::len).sum::<usize>();
    println!("manifest records: {before} -> {after}");
    Ok(())
}
