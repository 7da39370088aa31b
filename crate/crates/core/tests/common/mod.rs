#![allow(dead_code)]

use std::path::{Path, PathBuf};

use recontext::config::{parse_config, LoadedConfig};

/// A small, fast mock-backed config rooted at `dir`; `extra` is spliced in as
/// further top-level keys (leading comma included).
pub fn mock_config_text(extra: &str) -> String {
    format!(
        r#"{{"backends": {{"mock": true}}, "products": {{"demo": {{"count": 2, "images_per_product": 2, "size": 48}}}},
            "bank": {{"size": 8, "auto_approve": true}}, "augment": {{"n_frames": 5, "prompts_per_source": 2}},
            "generate": {{"prompts_per_product": 2, "samples_per_prompt": 2}}, "rank": {{"threshold": 0.0}}{extra}}}"#
    )
}

pub fn mock_config(dir: &Path, extra: &str) -> LoadedConfig {
    parse_config(&mock_config_text(extra), dir).expect("valid test config")
}

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, mock_config_text(extra)).unwrap();
    path
}

/// Binds a std listener on an ephemeral port and serves `make(listener)` on a
/// background runtime. Returns the base URL.
pub fn spawn_server<F, Fut>(make: F) -> String
where
    F: FnOnce(tokio::net::TcpListener) -> Fut + Send + 'static,
    Fut: std::future::Future<Output = std::io::Result<()>>,
{
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    listener.set_nonblocking(true).unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            make(listener).await.unwrap();
        });
    });
    format!("http://{addr}")
}
