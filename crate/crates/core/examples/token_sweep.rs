//! Rare-token selection: admissibility against product text, then a sweep
//! that keeps the token whose samples rank best.
//!
//!     cargo run --example token_sweep

use std::collections::BTreeMap;

use recontext::finetune::{admissible_tokens, is_admissible, token_sweep, DEFAULT_RARE_TOKENS};
use recontext::model::ProductRecord;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let product = ProductRecord {
        product_id: "p1".into(),
        title: "Skstone Ohwx Planter".into(),
        category: "planter".into(),
        metadata: BTreeMap::from([("brand".into(), "Skstone".into())]),
        base_asset_ids: vec!["base-a".into()],
    };
    let tokens: Vec<String> = DEFAULT_RARE_TOKENS.iter().map(|t| t.to_string()).collect();
    for t in ["sks", "ohwx", "zxq"] {
        println!("{t}: admissible = {}", is_admissible(t, &product));
    }
    println!("candidate order: {:?}", admissible_tokens(&product, &tokens, 3));

    // Stand-in for train + sample + rank: scores derived from the token's
    // letters, and one token whose training job fails.
    let outcome = token_sweep(&product, &tokens, 4, 3, 2, |token| match token {
        "zxq" => Err("trainer rejected job".into()),
        t => {
            let spread = t.bytes().map(f64::from).sum::<f64>() % 17.0 / 40.0;
            Ok(vec![1.5 + spread, 1.6 + spread / 2.0])
        }
    })?;
    for (token, score) in &outcome.scores {
        println!("  {token}: {score:.3}");
    }
    println!("failures: {:?}", outcome.failures);
    println!("best token: {}", outcome.best_token);
    Ok(())
}
