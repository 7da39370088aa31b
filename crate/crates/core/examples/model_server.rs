//! The mock model suite served over the JSON backend protocol, with the full
//! pipeline talking to it through the HTTP client as it would to real models.
//!
//!     cargo run --example model_server

use std::sync::Arc;

use recontext::backend::mock::MockSuite;
use recontext::backend::server::serve;
use recontext::config::parse_config;
use recontext::pipeline::{Pipeline, Stage};
use recontext::store::AssetStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let workdir = dir.path().join("work");

    // The model side reads reference pixels from the same store the pipeline writes.
    let pixels = Arc::new(AssetStore::open(workdir.join("store"))?);
    let backends = MockSuite::default().with_pixels(pixels).into_backends();
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().expect("runtime");
        rt.block_on(async {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            serve(listener, backends).await.expect("serve");
        });
    });
    println!("model server on http://{addr}");

    let config = format!(
        r#"{{
            "workdir": "work",
            "products": {{"demo": {{"count": 1}}}},
            "backends": {{"endpoint": "http://{addr}", "embed_dimension": 512}},
            "bank": {{"size": 12, "auto_approve": true}},
            "finetune": {{"poll_interval_ms": 10}}
        }}"#
    );
    let pipeline = Pipeline::new(parse_config(&config, dir.path())?)?;
    let summary = pipeline.run(&Stage::ALL)?;
    for (product, ranked) in &summary.ranked {
        println!("{product}: {} ranked images over HTTP", ranked.len());
    }
    print!("{}", std::fs::read_to_string(pipeline.run_dir().join("metrics_table.txt"))?);
    Ok(())
}
