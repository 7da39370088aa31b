//! Rater API on a local port, driven by three simulated raters over HTTP.
//!
//!     cargo run --example eval_server

use std::sync::Arc;

use recontext::demo::demo_products;
use recontext::human_eval::http::serve;
use recontext::human_eval::{EvalService, PROTOCOL};
use recontext::model::{Answer, AssetRole, ImageAsset};
use recontext::store::AssetStore;
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = AssetStore::open(dir.path().join("store"))?;
    let demo = demo_products(1, 2, 64, 0).remove(0);
    for (asset, raster) in &demo.images {
        store.put_asset(asset, raster)?;
    }
    store.store_product(&demo.product)?;
    // Pretend two base shots came back from the finetuned model.
    let mut generated = Vec::new();
    for (i, (_, raster)) in demo.images.iter().enumerate() {
        let asset = ImageAsset::new(format!("gen-{i}"), &demo.product.product_id, AssetRole::Generated, 64, 64)
            .with_prompt("a zxq chair in a sunlit loft");
        generated.push(store.put_asset(&asset, raster)?);
    }

    let service = EvalService::open(store, None, &dir.path().join("eval"))?;
    service.create_batch(&generated, 3)?;

    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let service = Arc::new(service);
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().expect("runtime");
        rt.block_on(async {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            serve(listener, service).await.expect("serve");
        });
    });
    let base = format!("http://{addr}");
    println!("rater API on {base}, protocol {} with {} questions", PROTOCOL.version, PROTOCOL.questions.len());

    let client = reqwest::blocking::Client::new();
    for rater in ["ana", "ben", "chi"] {
        loop {
            let resp = client.get(format!("{base}/tasks/next?rater={rater}")).send()?;
            if resp.status() == reqwest::StatusCode::NO_CONTENT {
                break;
            }
            let task: Value = resp.json()?;
            let image = client.get(format!("{base}/assets/{}/image", task["asset_id"].as_str().unwrap_or_default())).send()?;
            let bytes = image.bytes()?.len();
            // "chi" is strict about gen-1's logo.
            let strict = rater == "chi" && task["asset_id"] == "gen-1";
            let answers: Vec<Answer> = (0..8).map(|q| if strict && q == 1 { Answer::No } else { Answer::Yes }).collect();
            let status = client
                .post(format!("{base}/tasks/{}/rating", task["task_id"].as_str().unwrap_or_default()))
                .json(&json!({ "rater_id": rater, "answers": answers }))
                .send()?
                .status();
            println!("{rater} rated {} ({bytes} byte png) -> {status}", task["asset_id"]);
        }
    }

    for id in &generated {
        let v: Value = client.get(format!("{base}/verdicts/{id}")).send()?.json()?;
        println!("{id}: verdict {} from {}", v["verdict"], v["rater_verdicts"]);
    }
    let report: Value = client.get(format!("{base}/report")).send()?.json()?;
    println!("report: {report}");
    Ok(())
}
