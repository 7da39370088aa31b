//! Blocking HTTP client for model servers speaking the v1 protocol.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::*;
use super::{
    BackendError, BackendResult, Caption, Captioner, Embedder, EmbeddingModel, EmbeddingVector, ImageGenerator,
    JobRef, JobStatus, NovelViewGenerator, RetryPolicy, Sampler, Segmenter, TextGenerator, Trainer,
};
use crate::model::TrainingDatasetSpec;
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    timeout: Duration,
    dimension: usize,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> BackendResult<Self> {
        Self::with_options(base_url, RetryPolicy::default(), Duration::from_secs(120), 512)
    }

    pub fn with_options(
        base_url: impl Into<String>,
        retry: RetryPolicy,
        timeout: Duration,
        embedding_dimension: usize,
    ) -> BackendResult<Self> {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(BackendError::Configuration(format!("endpoint {base_url:?} is not an http(s) URL")));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Configuration(e.to_string()))?;
        Ok(Self { base_url, client, retry, timeout, dimension: embedding_dimension })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn call<P: Serialize, R: DeserializeOwned>(&self, op: Operation, payload: &P, seed: Option<u64>) -> BackendResult<R> {
        let request = WireRequest {
            operation: op.as_str().to_string(),
            payload: serde_json::to_value(payload).map_err(|e| BackendError::Protocol(e.to_string()))?,
            seed,
            version: PROTOCOL_VERSION.to_string(),
            backend_name: None,
            timeout_ms: Some(self.timeout.as_millis() as u64),
        };
        let url = format!("{}/{}/{}", self.base_url, PROTOCOL_VERSION, op.as_str());
        let value = self.retry.run(|| self.post(&url, &request))?;
        serde_json::from_value(value).map_err(|e| BackendError::Protocol(format!("{}: {e}", op.as_str())))
    }

    fn post(&self, url: &str, request: &WireRequest) -> BackendResult<serde_json::Value> {
        let response = self
            .client
            .post(url)
            .json(request)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("{url} returned {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("{url} returned {status}")));
        }
        let body: WireResponse = response.json().map_err(|e| BackendError::Protocol(e.to_string()))?;
        body.into_result()
    }
}

impl ImageGenerator for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn generate_raw(&self, prompt: &str, seed: u64) -> BackendResult<Raster> {
        let r: ImageResult = self.call(Operation::GenerateImage, &PromptPayload { prompt: prompt.into() }, Some(seed))?;
        decode_raster(&r.image)
    }

    fn outpaint_raw(&self, image: &Raster, mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster> {
        let payload = EditPayload { image: encode_raster(image)?, mask: encode_mask(mask)?, prompt: prompt.into() };
        let r: ImageResult = self.call(Operation::Outpaint, &payload, Some(seed))?;
        decode_raster(&r.image)
    }

    fn inpaint_raw(&self, image: &Raster, mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster> {
        let payload = EditPayload { image: encode_raster(image)?, mask: encode_mask(mask)?, prompt: prompt.into() };
        let r: ImageResult = self.call(Operation::Inpaint, &payload, Some(seed))?;
        decode_raster(&r.image)
    }
}

impl NovelViewGenerator for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn novel_views_raw(&self, image: &Raster, seed: u64, n_frames: usize) -> BackendResult<Vec<Raster>> {
        let payload = NovelViewsPayload { image: encode_raster(image)?, n_frames };
        let r: ImagesResult = self.call(Operation::GenerateNovelViews, &payload, Some(seed))?;
        r.images.iter().map(|s| decode_raster(s)).collect()
    }
}

impl Segmenter for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn segment_raw(&self, image: &Raster, subject_hint: &str) -> BackendResult<Mask> {
        let payload = SegmentPayload { image: encode_raster(image)?, subject_hint: subject_hint.into() };
        let r: MaskResult = self.call(Operation::Segment, &payload, None)?;
        decode_mask(&r.mask)
    }
}

impl Captioner for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn caption_raw(&self, image: &Raster, instruction: &str) -> BackendResult<Caption> {
        let payload = CaptionPayload { image: encode_raster(image)?, instruction: instruction.into() };
        let r: CaptionResult = self.call(Operation::Caption, &payload, None)?;
        Ok(r.caption)
    }
}

impl Embedder for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_image_raw(&self, image: &Raster, model: EmbeddingModel) -> BackendResult<EmbeddingVector> {
        let payload = EmbedImagePayload { image: encode_raster(image)?, model: model.as_str().into() };
        let r: EmbeddingResult = self.call(Operation::EmbedImage, &payload, None)?;
        Ok(r.embedding)
    }

    fn embed_text_raw(&self, text: &str, model: EmbeddingModel) -> BackendResult<EmbeddingVector> {
        let payload = EmbedTextPayload { text: text.into(), model: model.as_str().into() };
        let r: EmbeddingResult = self.call(Operation::EmbedText, &payload, None)?;
        Ok(r.embedding)
    }
}

impl TextGenerator for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn complete(&self, instruction: &str, seed: u64) -> BackendResult<String> {
        let r: TextResult = self.call(Operation::Complete, &CompletePayload { instruction: instruction.into() }, Some(seed))?;
        Ok(r.text)
    }
}

impl Trainer for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn submit_training_job(&self, spec: &TrainingDatasetSpec) -> BackendResult<JobRef> {
        let r: JobResult = self.call(Operation::SubmitTrainingJob, &SubmitJobPayload { spec: spec.clone() }, None)?;
        Ok(JobRef(r.job_ref))
    }

    fn poll_job(&self, job: &JobRef) -> BackendResult<JobStatus> {
        let r: StatusResult = self.call(Operation::PollJob, &PollJobPayload { job_ref: job.0.clone() }, None)?;
        Ok(r.status)
    }
}

impl Sampler for HttpBackend {
    fn name(&self) -> &str {
        &self.base_url
    }

    fn sample_raw(&self, model_ref: &str, prompt: &str, seed: u64, n: usize) -> BackendResult<Vec<Raster>> {
        let payload = SamplePayload { model_ref: model_ref.into(), prompt: prompt.into(), n };
        let r: ImagesResult = self.call(Operation::SampleFromModel, &payload, Some(seed))?;
        r.images.iter().map(|s| decode_raster(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_http_endpoints() {
        assert!(matches!(HttpBackend::new("ftp://x"), Err(BackendError::Configuration(_))));
        assert_eq!(HttpBackend::new("http://localhost:9/").unwrap().base_url(), "http://localhost:9");
    }

    #[test]
    fn unreachable_server_is_a_transport_error_after_retries() {
        let client = HttpBackend::with_options(
            "http://127.0.0.1:9",
            RetryPolicy { max_retries: 1, base_delay: Duration::ZERO },
            Duration::from_millis(500),
            512,
        )
        .unwrap();
        assert!(matches!(client.generate_image("a chair", 1), Err(BackendError::Transport(_))));
    }
}
