//! Mask-IoU filtering of outpainted images and the six-metric quality vector.
//!
//!     cargo run --example filtering

use recontext::backend::Backends;
use recontext::filtering::{
    compute_metric_vector, filter_by_iou, select_top_rated, IouCandidate, MetricInput, ReferenceSet, ScoredAsset,
};
use recontext::model::MetricKey;
use recontext::raster::{Mask, Raster};

fn object(size: u32, x0: u32, y0: u32, side: u32, rgb: [u8; 3]) -> (Raster, Mask) {
    let inside = move |x: u32, y: u32| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y);
    let raster = Raster::from_fn(size, size, |x, y| if inside(x, y) { rgb } else { [235, 235, 235] });
    (raster, Mask::from_fn(size, size, inside))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backends = Backends::mock();
    let (reference, reference_mask) = object(64, 16, 16, 32, [200, 40, 40]);

    // An outpainting that kept the product in place, one that shifted it, one with no mask.
    let candidates = vec![
        IouCandidate { asset_id: "kept".into(), outpainted_mask: Some(object(64, 16, 16, 32, [0; 3]).1), reference_mask: Some(reference_mask.clone()) },
        IouCandidate { asset_id: "moved".into(), outpainted_mask: Some(object(64, 28, 20, 32, [0; 3]).1), reference_mask: Some(reference_mask.clone()) },
        IouCandidate { asset_id: "unmasked".into(), outpainted_mask: None, reference_mask: Some(reference_mask.clone()) },
    ];
    let outcome = filter_by_iou(&candidates, 0.85);
    println!("kept {:?}", outcome.kept);
    for r in &outcome.rejected {
        println!("rejected {}: {}", r.asset_id, r.reason);
    }

    let refs = ReferenceSet::embed(backends.embedder.as_ref(), &[MetricInput::new(&reference, Some(&reference_mask))])?;
    let mut scored = Vec::new();
    for (id, rgb) in [("close", [195, 45, 40]), ("off-color", [40, 60, 200])] {
        let (image, mask) = object(64, 18, 14, 30, rgb);
        let v = compute_metric_vector(backends.embedder.as_ref(), MetricInput::new(&image, Some(&mask)), &refs, "a red chair")?;
        println!("{id}: {}", MetricKey::COMPONENTS.iter().map(|k| format!("{}={:.3}", k.label(), v.get(*k).unwrap_or(f64::NAN))).collect::<Vec<_>>().join(" "));
        scored.push(ScoredAsset::new(id, v));
    }
    let best = select_top_rated(&scored, 1, MetricKey::Aggregate);
    println!("top by aggregate: {}", best[0].asset_id);
    Ok(())
}
