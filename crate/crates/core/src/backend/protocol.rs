//! Versioned HTTP+JSON protocol between the pipeline and model servers.
//!
//! Every operation is `POST /v1/<operation>` with a [`WireRequest`] body and a
//! [`WireResponse`] reply. Rasters and masks travel as base64-encoded PNG.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendResult, Caption, EmbeddingVector, JobStatus};
use crate::model::TrainingDatasetSpec;
use crate::raster::{Mask, Raster};

pub const PROTOCOL_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    GenerateImage,
    Outpaint,
    Inpaint,
    GenerateNovelViews,
    Segment,
    Caption,
    EmbedImage,
    EmbedText,
    Complete,
    SubmitTrainingJob,
    PollJob,
    SampleFromModel,
}

impl Operation {
    pub const ALL: [Operation; 12] = [
        Operation::GenerateImage,
        Operation::Outpaint,
        Operation::Inpaint,
        Operation::GenerateNovelViews,
        Operation::Segment,
        Operation::Caption,
        Operation::EmbedImage,
        Operation::EmbedText,
        Operation::Complete,
        Operation::SubmitTrainingJob,
        Operation::PollJob,
        Operation::SampleFromModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Operation::GenerateImage => "generate_image",
            Operation::Outpaint => "outpaint",
            Operation::Inpaint => "inpaint",
            Operation::GenerateNovelViews => "generate_novel_views",
            Operation::Segment => "segment",
            Operation::Caption => "caption",
            Operation::EmbedImage => "embed_image",
            Operation::EmbedText => "embed_text",
            Operation::Complete => "complete",
            Operation::SubmitTrainingJob => "submit_training_job",
            Operation::PollJob => "poll_job",
            Operation::SampleFromModel => "sample_from_model",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.as_str() == s)
    }

    /// Generative operations must carry a seed.
    pub fn requires_seed(self) -> bool {
        matches!(
            self,
            Operation::GenerateImage
                | Operation::Outpaint
                | Operation::Inpaint
                | Operation::GenerateNovelViews
                | Operation::Complete
                | Operation::SampleFromModel
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub operation: String,
    pub payload: serde_json::Value,
    #[serde(default)]
    pub seed: Option<u64>,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl WireResponse {
    pub fn ok(payload: serde_json::Value) -> Self {
        Self { status: "ok".into(), payload: Some(payload), error: None }
    }

    pub fn error(err: &BackendError) -> Self {
        Self {
            status: "error".into(),
            payload: None,
            error: Some(WireError { code: err.code().into(), message: err.message(), retryable: err.is_retryable() }),
        }
    }

    pub fn into_result(self) -> BackendResult<serde_json::Value> {
        match (self.status.as_str(), self.payload, self.error) {
            ("ok", Some(p), _) => Ok(p),
            ("error", _, Some(e)) if e.retryable => Err(BackendError::Transport(e.message)),
            ("error", _, Some(e)) => Err(BackendError::from_code(&e.code, e.message)),
            (status, ..) => Err(BackendError::Protocol(format!("malformed response with status {status:?}"))),
        }
    }
}

pub fn encode_raster(r: &Raster) -> BackendResult<String> {
    Ok(STANDARD.encode(r.to_png().map_err(|e| BackendError::Protocol(e.to_string()))?))
}

pub fn decode_raster(s: &str) -> BackendResult<Raster> {
    let bytes = STANDARD.decode(s).map_err(|e| BackendError::Validation(format!("bad base64 raster: {e}")))?;
    Raster::from_png(&bytes).map_err(|e| BackendError::Validation(format!("bad png raster: {e}")))
}

pub fn encode_mask(m: &Mask) -> BackendResult<String> {
    Ok(STANDARD.encode(m.to_png().map_err(|e| BackendError::Protocol(e.to_string()))?))
}

pub fn decode_mask(s: &str) -> BackendResult<Mask> {
    let bytes = STANDARD.decode(s).map_err(|e| BackendError::Validation(format!("bad base64 mask: {e}")))?;
    Mask::from_png(&bytes).map_err(|e| BackendError::Validation(format!("bad png mask: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PromptPayload {
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditPayload {
    pub image: String,
    pub mask: String,
    pub prompt: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NovelViewsPayload {
    pub image: String,
    pub n_frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentPayload {
    pub image: String,
    pub subject_hint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptionPayload {
    pub image: String,
    pub instruction: String,
}

/// `model` stays a string on the wire so unknown names surface as configuration errors.
#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedImagePayload {
    pub image: String,
    pub model: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedTextPayload {
    pub text: String,
    pub model: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompletePayload {
    pub instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitJobPayload {
    pub spec: TrainingDatasetSpec,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PollJobPayload {
    pub job_ref: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SamplePayload {
    pub model_ref: String,
    pub prompt: String,
    pub n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImageResult {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImagesResult {
    pub images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResult {
    pub mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptionResult {
    pub caption: Caption,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TextResult {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobResult {
    pub job_ref: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusResult {
    pub status: JobStatus,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operation_names_parse_back() {
        for op in Operation::ALL {
            assert_eq!(Operation::parse(op.as_str()), Some(op));
        }
        assert_eq!(Operation::parse("nope"), None);
    }

    #[test]
    fn request_wire_shape() {
        let req = WireRequest {
            operation: "generate_image".into(),
            payload: serde_json::json!({"prompt": "a chair"}),
            seed: Some(7),
            version: PROTOCOL_VERSION.into(),
            backend_name: None,
            timeout_ms: None,
        };
        assert_eq!(
            crate::canonical::to_canonical_string(&req).unwrap(),
            r#"{"operation":"generate_image","payload":{"prompt":"a chair"},"seed":7,"version":"v1"}"#
        );
    }

    #[test]
    fn retryable_wire_errors_become_transport() {
        let resp = WireResponse {
            status: "error".into(),
            payload: None,
            error: Some(WireError { code: "overloaded".into(), message: "busy".into(), retryable: true }),
        };
        assert_eq!(resp.into_result(), Err(BackendError::Transport("busy".into())));
        let resp = WireResponse::error(&BackendError::Generation("refused".into()));
        assert_eq!(resp.into_result(), Err(BackendError::Generation("refused".into())));
    }

    #[test]
    fn raster_base64_round_trip() {
        let r = Raster::from_fn(5, 3, |x, y| [x as u8, y as u8, 9]);
        assert_eq!(decode_raster(&encode_raster(&r).unwrap()).unwrap(), r);
        assert!(matches!(decode_raster("!!"), Err(BackendError::Validation(_))));
    }
}
