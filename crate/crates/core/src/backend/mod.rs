//! Interfaces to the external models: image generation and editing, novel-view
//! video frames, segmentation, captioning, embeddings, an LLM for prompts, and
//! the finetuning trainer/sampler.
//!
//! Each trait splits into a `*_raw` method a backend implements and a provided
//! method that enforces the contract callers rely on (dimension checks,
//! region paste-back, anchor frame, unit-norm embeddings). Pipeline code only
//! calls the provided methods.
//!
//! [`mock`] holds deterministic pure-function implementations; [`http`] speaks
//! the JSON wire protocol in [`protocol`]; [`server`] exposes any backend set
//! over that protocol.

pub mod http;
pub mod mock;
pub mod protocol;
pub mod server;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TrainingDatasetSpec, MANDATORY_CAPTION_ATTRIBUTES};
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Backend unreachable or timed out; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    /// The model refused or failed to produce output; never retried.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    /// Trainer-side failure, message passed through verbatim.
    #[error("{0}")]
    Job(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }

    /// Stable wire code.
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "transport",
            BackendError::Generation(_) => "generation",
            BackendError::Precondition(_) => "precondition",
            BackendError::Validation(_) => "validation",
            BackendError::Configuration(_) => "configuration",
            BackendError::Job(_) => "job",
            BackendError::Protocol(_) => "protocol",
        }
    }

    pub fn from_code(code: &str, message: String) -> Self {
        match code {
            "transport" => BackendError::Transport(message),
            "generation" => BackendError::Generation(message),
            "precondition" => BackendError::Precondition(message),
            "validation" => BackendError::Validation(message),
            "configuration" => BackendError::Configuration(message),
            "job" => BackendError::Job(message),
            _ => BackendError::Protocol(format!("{code}: {message}")),
        }
    }

    pub fn message(&self) -> String {
        match self {
            BackendError::Transport(m)
            | BackendError::Generation(m)
            | BackendError::Precondition(m)
            | BackendError::Validation(m)
            | BackendError::Configuration(m)
            | BackendError::Job(m)
            | BackendError::Protocol(m) => m.clone(),
        }
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingModel {
    ClipImage,
    ClipText,
    Dino,
}

impl EmbeddingModel {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingModel::ClipImage => "clip_image",
            EmbeddingModel::ClipText => "clip_text",
            EmbeddingModel::Dino => "dino",
        }
    }

    pub fn is_image_model(self) -> bool {
        matches!(self, EmbeddingModel::ClipImage | EmbeddingModel::Dino)
    }
}

impl fmt::Display for EmbeddingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingModel {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clip_image" => Ok(EmbeddingModel::ClipImage),
            "clip_text" => Ok(EmbeddingModel::ClipText),
            "dino" => Ok(EmbeddingModel::Dino),
            other => Err(BackendError::Configuration(format!("unknown embedding model {other:?}"))),
        }
    }
}

/// A fixed-length embedding; `normalized` vectors have unit L2 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn raw(values: Vec<f64>) -> Self {
        Self { values, normalized: false }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Scales to unit norm. Zero vectors are left as they are.
    pub fn into_normalized(self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return Self { values: self.values, normalized: false };
        }
        Self { values: self.values.into_iter().map(|v| v / n).collect(), normalized: true }
    }
}

/// Caption text plus structured attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JobRef(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done { model_ref: String },
    Failed { message: String },
}

fn require_prompt(prompt: &str) -> BackendResult<()> {
    if prompt.trim().is_empty() {
        return Err(BackendError::Precondition("prompt must not be empty".into()));
    }
    Ok(())
}

fn require_same_dims(image: &Raster, mask: &Mask) -> BackendResult<()> {
    if image.dimensions() != mask.dimensions() {
        return Err(BackendError::Validation(format!(
            "mask {:?} does not match image {:?}",
            mask.dimensions(),
            image.dimensions()
        )));
    }
    Ok(())
}

/// Copies `source` pixels into `target` wherever `keep` is true.
pub fn paste_region(target: &mut Raster, source: &Raster, keep: impl Fn(u32, u32) -> bool) {
    for y in 0..source.height() {
        for x in 0..source.width() {
            if keep(x, y) {
                target.set_pixel(x, y, source.pixel(x, y));
            }
        }
    }
}

pub trait ImageGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn generate_raw(&self, prompt: &str, seed: u64) -> BackendResult<Raster>;
    /// Regenerates mask=0 pixels. Implementations may touch the foreground; it is restored.
    fn outpaint_raw(&self, image: &Raster, mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster>;
    /// Regenerates mask=1 pixels. Implementations may touch the background; it is restored.
    fn inpaint_raw(&self, image: &Raster, mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster>;

    fn generate_image(&self, prompt: &str, seed: u64) -> BackendResult<Raster> {
        require_prompt(prompt)?;
        self.generate_raw(prompt, seed)
    }

    /// Background replacement; mask=1 pixels come back bit-identical.
    fn outpaint(&self, image: &Raster, mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster> {
        require_prompt(prompt)?;
        require_same_dims(image, mask)?;
        let mut out = self.outpaint_raw(image, mask, prompt, seed)?;
        if out.dimensions() != image.dimensions() {
            return Err(BackendError::Generation(format!(
                "outpaint returned {:?} for a {:?} input",
                out.dimensions(),
                image.dimensions()
            )));
        }
        paste_region(&mut out, image, |x, y| mask.get(x, y));
        Ok(out)
    }

    /// Object replacement; mask=0 pixels come back bit-identical.
    fn inpaint(&self, image: &Raster, mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster> {
        require_prompt(prompt)?;
        require_same_dims(image, mask)?;
        let mut out = self.inpaint_raw(image, mask, prompt, seed)?;
        if out.dimensions() != image.dimensions() {
            return Err(BackendError::Generation(format!(
                "inpaint returned {:?} for a {:?} input",
                out.dimensions(),
                image.dimensions()
            )));
        }
        paste_region(&mut out, image, |x, y| !mask.get(x, y));
        Ok(out)
    }
}

pub trait NovelViewGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn novel_views_raw(&self, image: &Raster, seed: u64, n_frames: usize) -> BackendResult<Vec<Raster>>;

    /// Exactly `n_frames` frames of the input's size; frame 0 is the input itself.
    fn generate_novel_views(&self, image: &Raster, seed: u64, n_frames: usize) -> BackendResult<Vec<Raster>> {
        if n_frames == 0 {
            return Err(BackendError::Precondition("n_frames must be at least 1".into()));
        }
        let mut frames = self.novel_views_raw(image, seed, n_frames)?;
        if frames.len() != n_frames {
            return Err(BackendError::Generation(format!("expected {n_frames} frames, got {}", frames.len())));
        }
        if let Some(bad) = frames.iter().find(|f| f.dimensions() != image.dimensions()) {
            return Err(BackendError::Generation(format!("frame size {:?} differs from input", bad.dimensions())));
        }
        frames[0] = image.clone();
        Ok(frames)
    }
}

pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;
    fn segment_raw(&self, image: &Raster, subject_hint: &str) -> BackendResult<Mask>;

    fn segment(&self, image: &Raster, subject_hint: &str) -> BackendResult<Mask> {
        let mask = self.segment_raw(image, subject_hint)?;
        if mask.dimensions() != image.dimensions() {
            return Err(BackendError::Generation(format!(
                "segmenter returned {:?} mask for {:?} image",
                mask.dimensions(),
                image.dimensions()
            )));
        }
        Ok(mask)
    }
}

pub trait Captioner: Send + Sync {
    fn name(&self) -> &str;
    fn caption_raw(&self, image: &Raster, instruction: &str) -> BackendResult<Caption>;

    /// Caption with the mandatory attribute keys always present ("unknown" when missing).
    fn caption(&self, image: &Raster, instruction: &str) -> BackendResult<Caption> {
        if instruction.trim().is_empty() {
            return Err(BackendError::Precondition("instruction must not be empty".into()));
        }
        let mut caption = self.caption_raw(image, instruction)?;
        for key in MANDATORY_CAPTION_ATTRIBUTES {
            caption.attributes.entry(key.to_string()).or_insert_with(|| "unknown".to_string());
        }
        Ok(caption)
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_image_raw(&self, image: &Raster, model: EmbeddingModel) -> BackendResult<EmbeddingVector>;
    fn embed_text_raw(&self, text: &str, model: EmbeddingModel) -> BackendResult<EmbeddingVector>;

    fn embed_image(&self, image: &Raster, model: EmbeddingModel) -> BackendResult<EmbeddingVector> {
        if !model.is_image_model() {
            return Err(BackendError::Configuration(format!("{model} is not an image embedding model")));
        }
        self.checked(self.embed_image_raw(image, model)?)
    }

    fn embed_text(&self, text: &str, model: EmbeddingModel) -> BackendResult<EmbeddingVector> {
        if model != EmbeddingModel::ClipText {
            return Err(BackendError::Configuration(format!("{model} is not a text embedding model")));
        }
        if text.trim().is_empty() {
            return Err(BackendError::Precondition("text must not be empty".into()));
        }
        self.checked(self.embed_text_raw(text, model)?)
    }

    #[doc(hidden)]
    fn checked(&self, v: EmbeddingVector) -> BackendResult<EmbeddingVector> {
        if v.dimension() != self.dimension() {
            return Err(BackendError::Generation(format!(
                "embedding has dimension {}, configured {}",
                v.dimension(),
                self.dimension()
            )));
        }
        // Already-unit vectors pass through untouched so a wire hop is exact.
        let v = if v.normalized && (v.norm() - 1.0).abs() < 1e-12 { v } else { v.into_normalized() };
        if !v.normalized {
            return Err(BackendError::Generation("embedding is the zero vector".into()));
        }
        Ok(v)
    }
}

/// Text generation, used to draft context prompts.
pub trait TextGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, instruction: &str, seed: u64) -> BackendResult<String>;
}

pub trait Trainer: Send + Sync {
    fn name(&self) -> &str;
    fn submit_training_job(&self, spec: &TrainingDatasetSpec) -> BackendResult<JobRef>;
    fn poll_job(&self, job: &JobRef) -> BackendResult<JobStatus>;
}

pub trait Sampler: Send + Sync {
    fn name(&self) -> &str;
    fn sample_raw(&self, model_ref: &str, prompt: &str, seed: u64, n: usize) -> BackendResult<Vec<Raster>>;

    fn sample_from_model(&self, model_ref: &str, prompt: &str, seed: u64, n: usize) -> BackendResult<Vec<Raster>> {
        require_prompt(prompt)?;
        if n == 0 {
            return Err(BackendError::Precondition("n must be at least 1".into()));
        }
        let out = self.sample_raw(model_ref, prompt, seed, n)?;
        if out.len() != n {
            return Err(BackendError::Generation(format!("requested {n} samples, got {}", out.len())));
        }
        Ok(out)
    }
}

/// Polls until the job finishes or `max_polls` is exhausted.
pub fn wait_for_job(trainer: &dyn Trainer, job: &JobRef, interval: Duration, max_polls: usize) -> BackendResult<String> {
    for _ in 0..max_polls.max(1) {
        match trainer.poll_job(job)? {
            JobStatus::Done { model_ref } => return Ok(model_ref),
            JobStatus::Failed { message } => return Err(BackendError::Job(message)),
            JobStatus::Pending | JobStatus::Running => std::thread::sleep(interval),
        }
    }
    Err(BackendError::Transport(format!("job {} still running after {max_polls} polls", job.0)))
}

/// Retries transport errors with exponential backoff; other errors return at once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay_for(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> BackendResult<T>) -> BackendResult<T> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    std::thread::sleep(self.delay_for(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Source of reference pixels for samplers that imitate a finetuned model.
pub trait ReferencePixels: Send + Sync {
    fn reference(&self, asset_id: &str) -> Option<(Raster, Option<Mask>)>;
}

impl ReferencePixels for crate::store::AssetStore {
    fn reference(&self, asset_id: &str) -> Option<(Raster, Option<Mask>)> {
        self.load(asset_id).ok().map(|l| (l.raster, l.mask))
    }
}

/// One handle per model family, shared across pipeline stages.
#[derive(Clone)]
pub struct Backends {
    pub images: Arc<dyn ImageGenerator>,
    pub views: Arc<dyn NovelViewGenerator>,
    pub segmenter: Arc<dyn Segmenter>,
    pub captioner: Arc<dyn Captioner>,
    pub embedder: Arc<dyn Embedder>,
    pub llm: Arc<dyn TextGenerator>,
    pub trainer: Arc<dyn Trainer>,
    pub sampler: Arc<dyn Sampler>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("images", &self.images.name())
            .field("views", &self.views.name())
            .field("segmenter", &self.segmenter.name())
            .field("captioner", &self.captioner.name())
            .field("embedder", &self.embedder.name())
            .field("llm", &self.llm.name())
            .field("trainer", &self.trainer.name())
            .field("sampler", &self.sampler.name())
            .finish()
    }
}

impl Backends {
    /// Deterministic mocks with no reference pixels for the sampler.
    pub fn mock() -> Self {
        mock::MockSuite::default().into_backends()
    }

    /// Deterministic mocks whose sampler imitates the product from `pixels`.
    pub fn mock_with_pixels(pixels: Arc<dyn ReferencePixels>) -> Self {
        mock::MockSuite::default().with_pixels(pixels).into_backends()
    }

    /// Every family served by one HTTP endpoint speaking the v1 protocol.
    pub fn http(client: http::HttpBackend) -> Self {
        let c = Arc::new(client);
        Self {
            images: c.clone(),
            views: c.clone(),
            segmenter: c.clone(),
            captioner: c.clone(),
            embedder: c.clone(),
            llm: c.clone(),
            trainer: c.clone(),
            sampler: c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_gives_up_after_three_transport_errors() {
        let policy = RetryPolicy { max_retries: 3, base_delay: Duration::ZERO };
        let calls = Cell::new(0);
        let out: BackendResult<()> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Transport("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 4);
    }

    #[test]
    fn retry_recovers_from_transient_failure() {
        let policy = RetryPolicy { max_retries: 3, base_delay: Duration::ZERO };
        let calls = Cell::new(0);
        let out = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(BackendError::Transport("flaky".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out, Ok(7));
        assert_eq!(calls.get(), 3);
    }

    #[test]
    fn generation_errors_are_not_retried() {
        let policy = RetryPolicy { max_retries: 3, base_delay: Duration::ZERO };
        let calls = Cell::new(0);
        let _: BackendResult<()> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Generation("nsfw".into()))
        });
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn backoff_doubles_from_base() {
        let policy = RetryPolicy::default();
        assert_eq!(policy.delay_for(0), Duration::from_millis(500));
        assert_eq!(policy.delay_for(1), Duration::from_millis(1000));
        assert_eq!(policy.delay_for(2), Duration::from_millis(2000));
    }

    #[test]
    fn unknown_model_name_is_a_configuration_error() {
        assert!(matches!("clip".parse::<EmbeddingModel>(), Err(BackendError::Configuration(_))));
        assert_eq!("dino".parse::<EmbeddingModel>().unwrap(), EmbeddingModel::Dino);
    }

    #[test]
    fn error_codes_round_trip() {
        for e in [
            BackendError::Transport("a".into()),
            BackendError::Generation("b".into()),
            BackendError::Precondition("c".into()),
            BackendError::Validation("d".into()),
            BackendError::Configuration("e".into()),
            BackendError::Job("f".into()),
        ] {
            assert_eq!(BackendError::from_code(e.code(), e.message()), e);
        }
    }
}
