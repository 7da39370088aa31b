//! Threshold + top-N ranking, pass rates, uplift and metric/human correlation.
//!
//!     cargo run --example ranking_report

use std::collections::BTreeMap;

use recontext::filtering::ScoredAsset;
use recontext::model::{MetricVector, SegmentedScores};
use recontext::ranking::{
    build_metrics_report, correlation_report, per_image_pass_rate, per_product_pass_rate, rank_scored, ranking_uplift,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let vectors: Vec<MetricVector> = (0..8)
        .map(|i| {
            let q = i as f64 / 8.0;
            let seg = SegmentedScores { seg_clip_i: 0.6 + 0.3 * q, seg_clip_t: 0.1 + 0.1 * q, seg_dino_i: 0.5 + 0.4 * q };
            MetricVector::new(0.7 + 0.2 * q, 0.2, 0.6 + 0.3 * q, Some(seg))
        })
        .collect();
    let scored: Vec<ScoredAsset> = vectors.iter().enumerate().map(|(i, v)| ScoredAsset::new(format!("gen-{i}"), *v)).collect();

    let ranked = rank_scored(&scored, 3, 1.6);
    println!("ranked (threshold 1.6, top 3):");
    for s in &ranked {
        println!("  {} {:.3}", s.asset_id, s.metrics.aggregate);
    }

    // Simulated panel verdicts: the better images pass more often.
    let all_verdicts: Vec<bool> = (0..8).map(|i| i >= 4).collect();
    let top_verdicts: Vec<bool> = ranked.iter().map(|s| s.asset_id.as_str() >= "gen-4").collect();
    println!("per-image pass rate, all: {:.3}", per_image_pass_rate(&all_verdicts));
    println!("per-image pass rate, ranked: {:.3}", per_image_pass_rate(&top_verdicts));
    println!("ranking uplift: {:+.1}%", 100.0 * ranking_uplift(&all_verdicts, &top_verdicts)?);
    let by_product = BTreeMap::from([("p1".to_string(), all_verdicts[..4].to_vec()), ("p2".to_string(), all_verdicts[4..].to_vec())]);
    println!("per-product pass rate: {:.3}", per_product_pass_rate(&by_product));

    let top: Vec<MetricVector> = ranked.iter().map(|s| s.metrics).collect();
    print!("\n{}", build_metrics_report([("all", vectors.as_slice()), ("ranked", top.as_slice())]).to_text());

    let human: Vec<f64> = (0..8).map(|i| if i >= 4 { 1.0 } else { i as f64 / 8.0 }).collect();
    println!("\ncorrelation with human pass fraction:");
    for (key, r) in correlation_report(&vectors, &human) {
        match r {
            Ok(r) => println!("  {:<10} {r:.3}", key.label()),
            Err(e) => println!("  {:<10} n/a ({e})", key.label()),
        }
    }
    Ok(())
}
