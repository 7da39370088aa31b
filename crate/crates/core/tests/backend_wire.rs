mod common;

use std::time::Duration;

use recontext::backend::http::HttpBackend;
use recontext::backend::mock::MockSuite;
use recontext::backend::server::serve;
use recontext::backend::{wait_for_job, BackendError, Backends, EmbeddingModel, RetryPolicy};
use recontext::raster::{Mask, Raster};

fn pair() -> (Backends, Backends) {
    let local = MockSuite::default().into_backends();
    let served = local.clone();
    let url = common::spawn_server(move |l| serve(l, served));
    let retry = RetryPolicy { max_retries: 1, base_delay: Duration::from_millis(10) };
    let remote = Backends::http(HttpBackend::with_options(url, retry, Duration::from_secs(30), 512).unwrap());
    (local, remote)
}

fn product_shot() -> (Raster, Mask) {
    let inside = |x: u32, y: u32| (20..44).contains(&x) && (16..48).contains(&y);
    (Raster::from_fn(64, 64, |x, y| if inside(x, y) { [180, 30, 40] } else { [235, 235, 230] }), Mask::from_fn(64, 64, inside))
}

#[test]
fn every_operation_matches_in_process() {
    let (local, remote) = pair();
    let (image, mask) = product_shot();

    assert_eq!(remote.images.generate_image("a red chair", 3).unwrap(), local.images.generate_image("a red chair", 3).unwrap());
    assert_eq!(remote.images.outpaint(&image, &mask, "a loft", 4).unwrap(), local.images.outpaint(&image, &mask, "a loft", 4).unwrap());
    assert_eq!(remote.images.inpaint(&image, &mask, "a mug", 5).unwrap(), local.images.inpaint(&image, &mask, "a mug", 5).unwrap());
    assert_eq!(remote.views.generate_novel_views(&image, 6, 4).unwrap(), local.views.generate_novel_views(&image, 6, 4).unwrap());
    assert_eq!(remote.segmenter.segment(&image, "chair").unwrap(), local.segmenter.segment(&image, "chair").unwrap());
    assert_eq!(remote.captioner.caption(&image, "describe").unwrap(), local.captioner.caption(&image, "describe").unwrap());
    for model in [EmbeddingModel::ClipImage, EmbeddingModel::Dino] {
        assert_eq!(remote.embedder.embed_image(&image, model).unwrap(), local.embedder.embed_image(&image, model).unwrap());
    }
    assert_eq!(
        remote.embedder.embed_text("a red chair", EmbeddingModel::ClipText).unwrap(),
        local.embedder.embed_text("a red chair", EmbeddingModel::ClipText).unwrap()
    );
    assert_eq!(remote.llm.complete("scenes for a chair", 9).unwrap(), local.llm.complete("scenes for a chair", 9).unwrap());
}

#[test]
fn errors_cross_the_wire_typed() {
    let (_, remote) = pair();
    let (image, _) = product_shot();
    let err = remote.embedder.embed_image(&image, EmbeddingModel::ClipText).unwrap_err();
    assert!(matches!(err, BackendError::Validation(_) | BackendError::Configuration(_)), "{err:?}");
    let err = remote.views.generate_novel_views(&image, 1, 0).unwrap_err();
    assert!(!err.is_retryable(), "{err:?}");
}

#[test]
fn training_jobs_poll_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = recontext::pipeline::Pipeline::new(common::mock_config(dir.path(), "")).unwrap();
    use recontext::pipeline::Stage;
    let summary = pipeline.run(&Stage::ALL[..5]).unwrap();
    let m = pipeline.manifest(&summary.products[0]).unwrap();
    let rel = m.last_stage("assemble").unwrap().config_snapshot["spec_file"].as_str().unwrap().to_string();
    let spec: recontext::model::TrainingDatasetSpec =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("work").join(rel)).unwrap()).unwrap();

    let (local, remote) = pair();
    let job = remote.trainer.submit_training_job(&spec).unwrap();
    let model = wait_for_job(remote.trainer.as_ref(), &job, Duration::from_millis(5), 100).unwrap();
    assert!(!model.is_empty());
    let prompt = format!("a {} chair in a loft", spec.token);
    assert_eq!(remote.sampler.sample_from_model(&model, &prompt, 1, 2).unwrap(), local.sampler.sample_from_model(&model, &prompt, 1, 2).unwrap());
    let err = remote.sampler.sample_from_model(&model, "", 1, 1).unwrap_err();
    assert!(!err.is_retryable(), "{err:?}");
}

#[test]
fn dead_endpoint_is_a_transport_error() {
    let retry = RetryPolicy { max_retries: 1, base_delay: Duration::from_millis(1) };
    let remote = Backends::http(HttpBackend::with_options("http://127.0.0.1:9", retry, Duration::from_millis(500), 512).unwrap());
    let err = remote.llm.complete("x", 0).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
}
