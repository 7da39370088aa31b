//! Domain records shared by every pipeline stage.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid {kind}: {reason}")]
pub struct ValidationError {
    pub kind: &'static str,
    pub reason: String,
}

impl ValidationError {
    pub fn new(kind: &'static str, reason: impl Into<String>) -> Self {
        Self { kind, reason: reason.into() }
    }
}

fn check(cond: bool, kind: &'static str, reason: impl FnOnce() -> String) -> Result<(), ValidationError> {
    if cond {
        Ok(())
    } else {
        Err(ValidationError::new(kind, reason()))
    }
}

/// A product and its few-shot input photos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub title: String,
    pub category: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub base_asset_ids: Vec<String>,
}

impl ProductRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        check(!self.product_id.is_empty(), "product", || "product_id is empty".into())?;
        check(!self.category.trim().is_empty(), "product", || {
            format!("product {} has no category", self.product_id)
        })?;
        check(!self.base_asset_ids.is_empty(), "product", || {
            format!("product {} has no base images", self.product_id)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetRole {
    Base,
    NovelView,
    NewContext,
    Negative,
    Counterfactual,
    Generated,
}

impl AssetRole {
    pub const ALL: [AssetRole; 6] = [
        AssetRole::Base,
        AssetRole::NovelView,
        AssetRole::NewContext,
        AssetRole::Negative,
        AssetRole::Counterfactual,
        AssetRole::Generated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssetRole::Base => "base",
            AssetRole::NovelView => "novel_view",
            AssetRole::NewContext => "new_context",
            AssetRole::Negative => "negative",
            AssetRole::Counterfactual => "counterfactual",
            AssetRole::Generated => "generated",
        }
    }

    /// Positive training images, in truncation priority order (lower keeps first).
    pub fn positive_priority(self) -> Option<u8> {
        match self {
            AssetRole::Base => Some(0),
            AssetRole::NovelView => Some(1),
            AssetRole::NewContext => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for AssetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_name: String,
    #[serde(default)]
    pub backend_params: BTreeMap<String, String>,
    pub seed: u64,
}

impl Provenance {
    pub fn new(backend_name: impl Into<String>, seed: u64) -> Self {
        Self { backend_name: backend_name.into(), backend_params: BTreeMap::new(), seed }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<String>) -> Self {
        self.backend_params.insert(key.to_string(), value.into());
        self
    }
}

/// Metadata for one stored image. Pixels live next to it in the asset store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAsset {
    pub asset_id: String,
    pub product_id: String,
    pub role: AssetRole,
    /// Store-relative path of the PNG; filled in by the store.
    #[serde(default)]
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub mask_ref: Option<String>,
    #[serde(default)]
    pub caption_id: Option<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ImageAsset {
    pub fn new(asset_id: impl Into<String>, product_id: impl Into<String>, role: AssetRole, width: u32, height: u32) -> Self {
        Self {
            asset_id: asset_id.into(),
            product_id: product_id.into(),
            role,
            image_ref: String::new(),
            width,
            height,
            prompt: None,
            mask_ref: None,
            caption_id: None,
            provenance: Provenance::default(),
        }
    }

    pub fn with_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.prompt = Some(prompt.into());
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Asset the image was derived from, when recorded.
    pub fn source_asset_id(&self) -> Option<&str> {
        self.provenance.backend_params.get("source_asset_id").map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        check(!self.asset_id.is_empty(), "asset", || "asset_id is empty".into())?;
        check(!self.product_id.is_empty(), "asset", || format!("asset {} has no product_id", self.asset_id))?;
        check(self.width > 0 && self.height > 0, "asset", || {
            format!("asset {} has dimensions {}x{}", self.asset_id, self.width, self.height)
        })?;
        if self.role == AssetRole::Base {
            check(self.provenance.backend_name.is_empty(), "asset", || {
                format!("base asset {} carries backend provenance", self.asset_id)
            })?;
        }
        if matches!(self.role, AssetRole::NewContext | AssetRole::Counterfactual) {
            check(self.prompt.as_deref().is_some_and(|p| !p.trim().is_empty()), "asset", || {
                format!("{} asset {} requires a prompt", self.role, self.asset_id)
            })?;
        }
        Ok(())
    }
}

pub const MANDATORY_CAPTION_ATTRIBUTES: [&str; 3] = ["color", "position", "lighting"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub asset_id: String,
    pub text: String,
    pub attributes: BTreeMap<String, String>,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        check(!self.text.trim().is_empty(), "caption", || format!("caption {} is empty", self.caption_id))?;
        for key in MANDATORY_CAPTION_ATTRIBUTES {
            check(self.attributes.contains_key(key), "caption", || {
                format!("caption {} lacks attribute {key}", self.caption_id)
            })?;
        }
        Ok(())
    }
}

/// Foreground-localized scores; absent when either side has no mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentedScores {
    pub seg_clip_i: f64,
    pub seg_clip_t: f64,
    pub seg_dino_i: f64,
}

/// The six similarity metrics for one generated image plus the ranking aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub clip_i: f64,
    pub clip_t: f64,
    pub dino_i: f64,
    pub seg_clip_i: Option<f64>,
    pub seg_clip_t: Option<f64>,
    pub seg_dino_i: Option<f64>,
    pub aggregate: f64,
}

impl MetricVector {
    pub fn new(clip_i: f64, clip_t: f64, dino_i: f64, segmented: Option<SegmentedScores>) -> Self {
        Self {
            clip_i,
            clip_t,
            dino_i,
            seg_clip_i: segmented.map(|s| s.seg_clip_i),
            seg_clip_t: segmented.map(|s| s.seg_clip_t),
            seg_dino_i: segmented.map(|s| s.seg_dino_i),
            aggregate: clip_i + clip_t + dino_i,
        }
    }

    pub fn get(&self, key: MetricKey) -> Option<f64> {
        match key {
            MetricKey::Aggregate => Some(self.aggregate),
            MetricKey::ClipI => Some(self.clip_i),
            MetricKey::ClipT => Some(self.clip_t),
            MetricKey::DinoI => Some(self.dino_i),
            MetricKey::SegClipI => self.seg_clip_i,
            MetricKey::SegClipT => self.seg_clip_t,
            MetricKey::SegDinoI => self.seg_dino_i,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        for key in MetricKey::COMPONENTS {
            if let Some(v) = self.get(key) {
                check((-1.0..=1.0).contains(&v), "metric vector", || format!("{key} = {v} outside [-1, 1]"))?;
            }
        }
        check(self.aggregate == self.clip_i + self.clip_t + self.dino_i, "metric vector", || {
            "aggregate is not clip_i + clip_t + dino_i".into()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKey {
    Aggregate,
    ClipI,
    ClipT,
    DinoI,
    SegClipI,
    SegClipT,
    SegDinoI,
}

impl MetricKey {
    /// The six components in report row order.
    pub const COMPONENTS: [MetricKey; 6] = [
        MetricKey::ClipI,
        MetricKey::ClipT,
        MetricKey::DinoI,
        MetricKey::SegClipI,
        MetricKey::SegClipT,
        MetricKey::SegDinoI,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MetricKey::Aggregate => "Aggregate",
            MetricKey::ClipI => "CLIP-I",
            MetricKey::ClipT => "CLIP-T",
            MetricKey::DinoI => "DINO-I",
            MetricKey::SegClipI => "SegCLIP-I",
            MetricKey::SegClipT => "SegCLIP-T",
            MetricKey::SegDinoI => "SegDINO-I",
        }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One of the four points of the rating scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    Maybe,
    No,
    Unclear,
}

impl Answer {
    pub const ALL: [Answer; 4] = [Answer::Yes, Answer::Maybe, Answer::No, Answer::Unclear];
}

pub const QUESTION_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rating_id: String,
    pub asset_id: String,
    pub rater_id: String,
    pub answers: [Answer; QUESTION_COUNT],
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Pending,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBankEntry {
    pub entry_id: String,
    pub category: String,
    pub prompt_text: String,
    pub status: EntryStatus,
    pub usage_count: u64,
}

/// Everything a trainer needs to finetune one product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDatasetSpec {
    pub product_id: String,
    pub token: String,
    pub category: String,
    pub positive_asset_ids: Vec<String>,
    pub negative_asset_ids: Vec<String>,
    /// Training caption per asset id (positives already carry the token prefix).
    pub captions: BTreeMap<String, String>,
    pub ratio: (u32, u32),
    pub lora_rank: u32,
    pub train_steps: u32,
    pub learning_rate: f64,
}

pub const MAX_LORA_RANK: u32 = 64;

pub fn is_valid_token(token: &str) -> bool {
    !token.is_empty() && !token.chars().any(|c| c.is_whitespace() || c.is_uppercase())
}

pub fn is_valid_lora_rank(rank: u32) -> bool {
    rank.is_power_of_two() && rank <= MAX_LORA_RANK
}

impl TrainingDatasetSpec {
    pub fn validate(&self) -> Result<(), ValidationError> {
        check(is_valid_token(&self.token), "training spec", || {
            format!("token {:?} must be non-empty, lowercase and whitespace-free", self.token)
        })?;
        check(is_valid_lora_rank(self.lora_rank), "training spec", || {
            format!("lora_rank {} is not a power of two up to {MAX_LORA_RANK}", self.lora_rank)
        })?;
        check(self.train_steps > 0, "training spec", || "train_steps must be positive".into())?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "training spec", || {
            format!("learning_rate {} must be positive", self.learning_rate)
        })?;
        let (rp, rn) = self.ratio;
        check(rp >= 1 && rn >= 1, "training spec", || "ratio terms must be at least 1".into())?;
        let allowed = self.positive_asset_ids.len() * rn as usize / rp as usize;
        check(self.negative_asset_ids.len() <= allowed, "training spec", || {
            format!(
                "{} negatives exceed {}:{} ratio allowance {} for {} positives",
                self.negative_asset_ids.len(),
                rp,
                rn,
                allowed,
                self.positive_asset_ids.len()
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_context_requires_prompt() {
        let a = ImageAsset::new("a", "p", AssetRole::NewContext, 4, 4);
        assert!(a.validate().is_err());
        assert!(a.clone().with_prompt("  ").validate().is_err());
        assert!(a.with_prompt("a loft").validate().is_ok());
    }

    #[test]
    fn base_assets_have_no_backend() {
        let a = ImageAsset::new("a", "p", AssetRole::Base, 4, 4).with_provenance(Provenance::new("mock", 1));
        assert!(a.validate().is_err());
    }

    #[test]
    fn metric_vector_aggregate_is_component_sum() {
        let m = MetricVector::new(0.8, 0.2, 0.9, None);
        assert_eq!(m.aggregate, 0.8 + 0.2 + 0.9);
        assert!(m.validate().is_ok());
        assert_eq!(m.get(MetricKey::SegClipI), None);
        assert!(MetricVector::new(1.5, 0.0, 0.0, None).validate().is_err());
    }

    #[test]
    fn lora_rank_and_token_rules() {
        for r in [1, 2, 4, 8, 16, 32, 64] {
            assert!(is_valid_lora_rank(r));
        }
        for r in [0, 3, 12, 128] {
            assert!(!is_valid_lora_rank(r));
        }
        assert!(is_valid_token("zxq"));
        assert!(!is_valid_token("Zxq"));
        assert!(!is_valid_token("z q"));
        assert!(!is_valid_token(""));
    }

    #[test]
    fn role_serializes_snake_case() {
        assert_eq!(serde_json::to_string(&AssetRole::NovelView).unwrap(), "\"novel_view\"");
        for role in AssetRole::ALL {
            assert_eq!(serde_json::to_string(&role).unwrap(), format!("\"{role}\""));
        }
    }
}
