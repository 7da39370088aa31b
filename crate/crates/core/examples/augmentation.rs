//! Grow one product's few photos into a training pool: novel views,
//! re-contextualized scenes, captions, negatives and counterfactuals.
//!
//!     cargo run --example augmentation

use std::sync::Arc;

use recontext::augmentation::{enforce_ratio, Augmenter, DEFAULT_CAPTION_TEMPLATE};
use recontext::backend::mock::MockSuite;
use recontext::demo::demo_products;
use recontext::prompt_bank::PromptBank;
use recontext::store::AssetStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = Arc::new(AssetStore::open(dir.path().join("store"))?);
    let bank = PromptBank::open(dir.path().join("bank"))?;
    let backends = MockSuite::default().with_pixels(store.clone()).into_backends();

    let demo = demo_products(1, 3, 64, 0).remove(0);
    for (asset, raster) in &demo.images {
        store.put_asset(asset, raster)?;
    }
    store.store_product(&demo.product)?;
    let product = &demo.product;
    for category in [product.category.as_str(), "mug"] {
        bank.populate(category, 10, backends.llm.as_ref(), 3)?;
        bank.approve_all(category, "example")?;
    }

    let aug = Augmenter::new(&store, &backends, "example-run");
    let views = aug.harvest_novel_views(product, 8, 2, 1)?;
    println!("novel views: {} kept, {} skipped", views.assets.len(), views.skipped.len());

    let mut sources = product.base_asset_ids.clone();
    sources.extend(views.ids());
    let scenes = aug.new_context_batch(&sources, &product.category, &bank, 2, 1)?;
    println!("new-context scenes: {}", scenes.assets.len());
    if let Some(scene) = scenes.assets.first() {
        println!("  e.g. {:?}", scene.prompt.as_deref().unwrap_or_default());
    }

    let mut positives = sources.clone();
    positives.extend(scenes.ids());
    let (captions, _) = aug.caption_assets(&positives, DEFAULT_CAPTION_TEMPLATE, product)?;
    println!("captions: {} (first: {:?})", captions.len(), captions[0].text);

    let captioned: Vec<String> = captions.iter().map(|c| c.asset_id.clone()).collect();
    let negatives = aug.generate_negatives(product, &captioned, 4, 1)?;
    let counterfactuals = aug.counterfactual_batch(&product.base_asset_ids, &["mug".to_string()], &bank, 3, 1)?;

    let pos: Vec<_> = captioned.iter().map(|id| store.load_asset(id)).collect::<Result<_, _>>()?;
    let mut neg = negatives.assets.clone();
    neg.extend(counterfactuals.assets.iter().cloned());
    let (kp, kn) = enforce_ratio(&pos, &neg, 2, 1);
    println!("training pool at 2:1 -> {} positives, {} negatives", kp.len(), kn.len());
    Ok(())
}
