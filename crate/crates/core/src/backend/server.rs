//! Serves a [`Backends`] set over the v1 protocol.
//!
//! Useful for running the mock models out of process, and as the reference
//! the HTTP client is tested against.

use axum::extract::{Path, State};
use axum::routing::post;
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::*;
use super::{BackendError, BackendResult, Backends, JobRef};

pub fn router(backends: Backends) -> Router {
    Router::new().route("/{version}/{operation}", post(handle)).with_state(backends)
}

/// Serves on `listener` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, backends: Backends) -> std::io::Result<()> {
    axum::serve(listener, router(backends)).await
}

async fn handle(
    State(backends): State<Backends>,
    Path((version, operation)): Path<(String, String)>,
    Json(request): Json<WireRequest>,
) -> Json<WireResponse> {
    let reply = tokio::task::spawn_blocking(move || {
        if version != PROTOCOL_VERSION || request.version != PROTOCOL_VERSION {
            return Err(BackendError::Protocol(format!("unsupported protocol version {:?}", request.version)));
        }
        if request.operation != operation {
            return Err(BackendError::Validation(format!(
                "path operation {operation:?} disagrees with body {:?}",
                request.operation
            )));
        }
        dispatch(&backends, &request)
    })
    .await
    .unwrap_or_else(|e| Err(BackendError::Generation(format!("backend task panicked: {e}"))));
    Json(match reply {
        Ok(payload) => WireResponse::ok(payload),
        Err(e) => WireResponse::error(&e),
    })
}

fn parse<P: DeserializeOwned>(request: &WireRequest) -> BackendResult<P> {
    serde_json::from_value(request.payload.clone())
        .map_err(|e| BackendError::Validation(format!("bad {} payload: {e}", request.operation)))
}

fn reply<R: Serialize>(r: R) -> BackendResult<serde_json::Value> {
    serde_json::to_value(r).map_err(|e| BackendError::Protocol(e.to_string()))
}

/// Runs one request against `backends`; the contract-enforcing trait methods are used.
pub fn dispatch(backends: &Backends, request: &WireRequest) -> BackendResult<serde_json::Value> {
    let op = Operation::parse(&request.operation)
        .ok_or_else(|| BackendError::Validation(format!("unknown operation {:?}", request.operation)))?;
    let seed = match (op.requires_seed(), request.seed) {
        (true, None) => return Err(BackendError::Validation(format!("{} requires a seed", op.as_str()))),
        (_, s) => s.unwrap_or(0),
    };
    match op {
        Operation::GenerateImage => {
            let p: PromptPayload = parse(request)?;
            reply(ImageResult { image: encode_raster(&backends.images.generate_image(&p.prompt, seed)?)? })
        }
        Operation::Outpaint => {
            let p: EditPayload = parse(request)?;
            let out = backends.images.outpaint(&decode_raster(&p.image)?, &decode_mask(&p.mask)?, &p.prompt, seed)?;
            reply(ImageResult { image: encode_raster(&out)? })
        }
        Operation::Inpaint => {
            let p: EditPayload = parse(request)?;
            let out = backends.images.inpaint(&decode_raster(&p.image)?, &decode_mask(&p.mask)?, &p.prompt, seed)?;
            reply(ImageResult { image: encode_raster(&out)? })
        }
        Operation::GenerateNovelViews => {
            let p: NovelViewsPayload = parse(request)?;
            let frames = backends.views.generate_novel_views(&decode_raster(&p.image)?, seed, p.n_frames)?;
            reply(ImagesResult { images: frames.iter().map(encode_raster).collect::<BackendResult<_>>()? })
        }
        Operation::Segment => {
            let p: SegmentPayload = parse(request)?;
            reply(MaskResult { mask: encode_mask(&backends.segmenter.segment(&decode_raster(&p.image)?, &p.subject_hint)?)? })
        }
        Operation::Caption => {
            let p: CaptionPayload = parse(request)?;
            reply(CaptionResult { caption: backends.captioner.caption(&decode_raster(&p.image)?, &p.instruction)? })
        }
        Operation::EmbedImage => {
            let p: EmbedImagePayload = parse(request)?;
            let model = p.model.parse()?;
            reply(EmbeddingResult { embedding: backends.embedder.embed_image(&decode_raster(&p.image)?, model)? })
        }
        Operation::EmbedText => {
            let p: EmbedTextPayload = parse(request)?;
            let model = p.model.parse()?;
            reply(EmbeddingResult { embedding: backends.embedder.embed_text(&p.text, model)? })
        }
        Operation::Complete => {
            let p: CompletePayload = parse(request)?;
            reply(TextResult { text: backends.llm.complete(&p.instruction, seed)? })
        }
        Operation::SubmitTrainingJob => {
            let p: SubmitJobPayload = parse(request)?;
            reply(JobResult { job_ref: backends.trainer.submit_training_job(&p.spec)?.0 })
        }
        Operation::PollJob => {
            let p: PollJobPayload = parse(request)?;
            reply(StatusResult { status: backends.trainer.poll_job(&JobRef(p.job_ref))? })
        }
        Operation::SampleFromModel => {
            let p: SamplePayload = parse(request)?;
            let images = backends.sampler.sample_from_model(&p.model_ref, &p.prompt, seed, p.n)?;
            reply(ImagesResult { images: images.iter().map(encode_raster).collect::<BackendResult<_>>()? })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(op: &str, payload: serde_json::Value, seed: Option<u64>) -> WireRequest {
        WireRequest {
            operation: op.into(),
            payload,
            seed,
            version: PROTOCOL_VERSION.into(),
            backend_name: None,
            timeout_ms: None,
        }
    }

    #[test]
    fn generative_calls_need_a_seed() {
        let err = dispatch(&Backends::mock(), &request("generate_image", serde_json::json!({"prompt": "x"}), None));
        assert!(matches!(err, Err(BackendError::Validation(_))));
    }

    #[test]
    fn unknown_model_string_is_configuration_error() {
        let payload = serde_json::json!({"text": "a chair", "model": "clip_textual"});
        let err = dispatch(&Backends::mock(), &request("embed_text", payload, None));
        assert!(matches!(err, Err(BackendError::Configuration(_))));
    }

    #[test]
    fn unknown_operation_rejected() {
        assert!(dispatch(&Backends::mock(), &request("teleport", serde_json::json!({}), Some(1))).is_err());
    }
}
