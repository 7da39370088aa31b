//! Token choice, training-set assembly and ablation grids for the trainer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{derive_seed, to_canonical_string};
use crate::model::{is_valid_token, ImageAsset, ProductRecord, TrainingDatasetSpec, ValidationError};
use crate::parallel::bounded_map;

/// Rare identifiers tried when the config supplies none.
pub const DEFAULT_RARE_TOKENS: [&str; 12] = ["sks", "zxq", "qvx", "ohwx", "pll", "bnha", "vrk", "olis", "tyx", "kmr", "xjv", "wqz"];

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("no candidate tokens supplied")]
    NoTokens,
    #[error("every candidate token collides with the title or metadata of {0}")]
    TokenExhausted(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("positive {0} has no caption")]
    MissingCaption(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("token sweep failed for every token: {}", format_failures(.0))]
    SweepFailed(BTreeMap<String, String>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn format_failures(f: &BTreeMap<String, String>) -> String {
    f.iter().map(|(t, m)| format!("{t}: {m}")).collect::<Vec<_>>().join("; ")
}

pub type FinetuneResult<T> = Result<T, FinetuneError>;

/// True when `token` could not be mistaken for part of the product's name or details.
pub fn is_admissible(token: &str, product: &ProductRecord) -> bool {
    let t = token.to_lowercase();
    is_valid_token(token)
        && !product.title.to_lowercase().contains(&t)
        && !product.metadata.values().any(|v| v.to_lowercase().contains(&t))
}

/// Candidates in seed-shuffled order with colliding tokens removed.
pub fn admissible_tokens(product: &ProductRecord, rare_tokens: &[String], seed: u64) -> Vec<String> {
    let mut order = rare_tokens.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "tokens")));
    order.retain(|t| is_admissible(t, product));
    order
}

pub fn select_token(product: &ProductRecord, rare_tokens: &[String], seed: u64) -> FinetuneResult<String> {
    if rare_tokens.is_empty() {
        return Err(FinetuneError::NoTokens);
    }
    admissible_tokens(product, rare_tokens, seed)
        .into_iter()
        .next()
        .ok_or_else(|| FinetuneError::TokenExhausted(product.product_id.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub best_token: String,
    /// Per-token score in candidate order; failed tokens score `-inf`.
    pub scores: Vec<(String, f64)>,
    pub failures: BTreeMap<String, String>,
}

/// Scores the first `sweep_size` admissible tokens with `evaluate`, which runs
/// assemble, train, sample and rank for one token and returns the aggregate
/// scores of its ranked samples. A token scores the mean of those. Ties go to
/// the earlier candidate.
pub fn token_sweep<F>(
    product: &ProductRecord,
    rare_tokens: &[String],
    sweep_size: usize,
    seed: u64,
    concurrency: usize,
    evaluate: F,
) -> FinetuneResult<SweepOutcome>
where
    F: Fn(&str) -> Result<Vec<f64>, String> + Sync,
{
    if sweep_size == 0 {
        return Err(FinetuneError::Precondition("sweep_size must be at least 1".into()));
    }
    if rare_tokens.is_empty() {
        return Err(FinetuneError::NoTokens);
    }
    let mut candidates = admissible_tokens(product, rare_tokens, seed);
    if candidates.is_empty() {
        return Err(FinetuneError::TokenExhausted(product.product_id.clone()));
    }
    candidates.truncate(sweep_size);
    let results = bounded_map(&candidates, concurrency, |t| evaluate(t));
    let mut scores = Vec::with_capacity(candidates.len());
    let mut failures = BTreeMap::new();
    for (token, r) in candidates.iter().zip(results) {
        let score = match r {
            Ok(v) if v.is_empty() => f64::NEG_INFINITY,
            Ok(v) => v.iter().sum::<f64>() / v.len() as f64,
            Err(msg) => {
                failures.insert(token.clone(), msg);
                f64::NEG_INFINITY
            }
        };
        scores.push((token.clone(), score));
    }
    if failures.len() == candidates.len() {
        return Err(FinetuneError::SweepFailed(failures));
    }
    let best = scores
        .iter()
        .filter(|(t, _)| !failures.contains_key(t))
        .fold(None::<&(String, f64)>, |best, c| match best {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        })
        .expect("at least one token succeeded");
    Ok(SweepOutcome { best_token: best.0.clone(), scores, failures })
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lora_rank: u32,
    pub train_steps: u32,
    pub learning_rate: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { lora_rank: 64, train_steps: 1800, learning_rate: 1e-4 }
    }
}

/// Training caption for a positive: the token phrase, then the original caption.
pub fn positive_caption(token: &str, category: &str, caption: &str) -> String {
    format!("a {token} {category}, {caption}")
}

/// Builds the spec. `captions` maps asset id to caption text; negatives
/// without one fall back to their generation prompt.
pub fn assemble_dataset(
    product: &ProductRecord,
    token: &str,
    positives: &[ImageAsset],
    negatives: &[ImageAsset],
    captions: &BTreeMap<String, String>,
    ratio: (u32, u32),
    params: TrainParams,
) -> FinetuneResult<TrainingDatasetSpec> {
    let (rp, rn) = ratio;
    if rp == 0 || rn == 0 {
        return Err(FinetuneError::Precondition("ratio terms must be at least 1".into()));
    }
    let allowed = positives.len() * rn as usize / rp as usize;
    if negatives.len() > allowed {
        return Err(FinetuneError::Precondition(format!(
            "{} negatives exceed the {rp}:{rn} allowance of {allowed}; apply enforce_ratio first",
            negatives.len()
        )));
    }
    let mut spec_captions = BTreeMap::new();
    for p in positives {
        let c = captions.get(&p.asset_id).ok_or_else(|| FinetuneError::MissingCaption(p.asset_id.clone()))?;
        spec_captions.insert(p.asset_id.clone(), positive_caption(token, &product.category, c));
    }
    for n in negatives {
        let c = captions
            .get(&n.asset_id)
            .cloned()
            .or_else(|| n.prompt.clone())
            .ok_or_else(|| FinetuneError::MissingCaption(n.asset_id.clone()))?;
        spec_captions.insert(n.asset_id.clone(), c);
    }
    let spec = TrainingDatasetSpec {
        product_id: product.product_id.clone(),
        token: token.to_string(),
        category: product.category.clone(),
        positive_asset_ids: positives.iter().map(|a| a.asset_id.clone()).collect(),
        negative_asset_ids: negatives.iter().map(|a| a.asset_id.clone()).collect(),
        captions: spec_captions,
        ratio,
        lora_rank: params.lora_rank,
        train_steps: params.train_steps,
        learning_rate: params.learning_rate,
    };
    spec.validate()?;
    Ok(spec)
}

/// One spec per `(rank, steps)` pair, rank-major.
pub fn emit_ablation_grid(spec: &TrainingDatasetSpec, ranks: &[u32], steps: &[u32]) -> FinetuneResult<Vec<TrainingDatasetSpec>> {
    if ranks.is_empty() || steps.is_empty() {
        return Err(FinetuneError::Precondition("ablation grid needs at least one rank and one step count".into()));
    }
    let mut out = Vec::with_capacity(ranks.len() * steps.len());
    for &lora_rank in ranks {
        for &train_steps in steps {
            let s = TrainingDatasetSpec { lora_rank, train_steps, ..spec.clone() };
            s.validate()?;
            out.push(s);
        }
    }
    Ok(out)
}

pub fn spec_path(run_dir: &Path, product_id: &str, token: &str) -> PathBuf {
    run_dir.join(product_id).join(format!("train_spec_{token}.spec"))
}

/// Writes the canonical spec under `run_dir`; returns the path.
pub fn write_spec(run_dir: &Path, spec: &TrainingDatasetSpec) -> FinetuneResult<PathBuf> {
    let path = spec_path(run_dir, &spec.product_id, &spec.token);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FinetuneError::Io { path, source }
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    std::fs::write(&path, to_canonical_string(spec)?).map_err(io(&path))?;
    Ok(path)
}
