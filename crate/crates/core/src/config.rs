//! Run configuration: one JSON file holding every tunable constant.
//!
//! Loading checks the raw document against a template of all known keys, so
//! unknown keys are rejected by path and every missing required key is
//! reported at once. The normalized echo is a fixed point: validating it again
//! yields the same text.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::augmentation::{DEFAULT_CAPTION_TEMPLATE, TITLE_PLACEHOLDER};
use crate::canonical::{digest_of, to_canonical_string};
use crate::finetune::{TrainParams, DEFAULT_RARE_TOKENS};
use crate::model::{is_valid_lora_rank, is_valid_token};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{}", render_problems(.unknown, .missing, .invalid))]
    Rejected { unknown: Vec<String>, missing: Vec<String>, invalid: Vec<String> },
}

fn render_problems(unknown: &[String], missing: &[String], invalid: &[String]) -> String {
    let mut parts = Vec::new();
    if !unknown.is_empty() {
        parts.push(format!("unknown keys: {}", unknown.join(", ")));
    }
    if !missing.is_empty() {
        parts.push(format!("missing required keys: {}", missing.join(", ")));
    }
    parts.extend(invalid.iter().cloned());
    format!("invalid config: {}", parts.join("; "))
}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// Where products come from. Exactly one of the two must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProductSource {
    /// Directory of `<product_id>/product.json` plus PNG base images.
    pub dir: Option<PathBuf>,
    /// Synthetic catalogue for demos and tests.
    pub demo: Option<DemoSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoSource {
    pub count: usize,
    pub images_per_product: usize,
    pub size: u32,
}

impl Default for DemoSource {
    fn default() -> Self {
        Self { count: 2, images_per_product: 3, size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub mock: bool,
    /// Base URL of a v1 protocol server; ignored when `mock` is set.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub embed_dimension: usize,
    /// Mock output resolution.
    pub image_size: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { mock: false, endpoint: None, timeout_ms: 120_000, max_retries: 3, embed_dimension: 512, image_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    pub size: usize,
    /// Skips human curation by approving every drafted prompt.
    pub auto_approve: bool,
    pub reviewer: String,
    pub distractor_categories: Vec<String>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            size: 50,
            auto_approve: false,
            reviewer: "auto".into(),
            distractor_categories: ["mug", "potted plant", "book", "sunglasses"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_frames: usize,
    pub frames_to_keep: usize,
    pub prompts_per_source: usize,
    pub caption_template: String,
    /// Positive to negative ratio.
    pub ratio: [u32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { n_frames: 8, frames_to_keep: 2, prompts_per_source: 3, caption_template: DEFAULT_CAPTION_TEMPLATE.into(), ratio: [2, 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub iou_threshold: f64,
    /// New-context images kept per product after the IoU check, best aggregate first.
    pub keep_top: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.85, keep_top: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub rare_tokens: Vec<String>,
    pub sweep_size: usize,
    pub lora_rank: u32,
    pub train_steps: u32,
    pub learning_rate: f64,
    pub ablation_ranks: Vec<u32>,
    pub ablation_steps: Vec<u32>,
    pub poll_interval_ms: u64,
    pub max_polls: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let p = TrainParams::default();
        Self {
            rare_tokens: DEFAULT_RARE_TOKENS.map(String::from).to_vec(),
            sweep_size: 1,
            lora_rank: p.lora_rank,
            train_steps: p.train_steps,
            learning_rate: p.learning_rate,
            ablation_ranks: Vec::new(),
            ablation_steps: Vec::new(),
            poll_interval_ms: 2_000,
            max_polls: 1_800,
        }
    }
}

impl FinetuneConfig {
    pub fn params(&self) -> TrainParams {
        TrainParams { lora_rank: self.lora_rank, train_steps: self.train_steps, learning_rate: self.learning_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub prompts_per_product: usize,
    pub samples_per_prompt: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { prompts_per_product: 4, samples_per_prompt: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankConfig {
    pub top_n: usize,
    pub threshold: f64,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self { top_n: 4, threshold: 1.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub raters_needed: usize,
    pub port: u16,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { raters_needed: 3, port: 8080 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Relative paths resolve against the config file's directory.
    pub workdir: PathBuf,
    pub seed: u64,
    /// Derived from the config when absent.
    pub run_id: Option<String>,
    pub concurrency: usize,
    pub products: ProductSource,
    pub backends: BackendConfig,
    pub bank: BankConfig,
    pub augment: AugmentConfig,
    pub filter: FilterConfig,
    pub finetune: FinetuneConfig,
    pub generate: GenerateConfig,
    pub rank: RankConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
            seed: 0,
            run_id: None,
            concurrency: 4,
            products: ProductSource::default(),
            backends: BackendConfig::default(),
            bank: BankConfig::default(),
            augment: AugmentConfig::default(),
            filter: FilterConfig::default(),
            finetune: FinetuneConfig::default(),
            generate: GenerateConfig::default(),
            rank: RankConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Every accepted key, with optional sections filled in so their children are known.
fn template() -> Value {
    let mut t = RunConfig::default();
    t.products.dir = Some(PathBuf::new());
    t.products.demo = Some(DemoSource::default());
    t.backends.endpoint = Some(String::new());
    t.run_id = Some(String::new());
    serde_json::to_value(t).expect("config template serializes")
}

fn unknown_keys(raw: &Value, template: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(raw), Value::Object(known)) = (raw, template) else { return };
    for (k, v) in raw {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => out.push(path),
            Some(t) => unknown_keys(v, t, &path, out),
        }
    }
}

fn lookup<'v>(raw: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(raw, |v, k| v.get(k)).filter(|v| !v.is_null())
}

/// A validated config plus what loading it had to say.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub warnings: Vec<String>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn workdir(&self) -> PathBuf {
        self.base_dir.join(&self.config.workdir)
    }

    pub fn products_dir(&self) -> Option<PathBuf> {
        self.config.products.dir.as_ref().map(|d| self.base_dir.join(d))
    }

    pub fn run_id(&self) -> String {
        self.config.run_id()
    }
}

impl RunConfig {
    /// The explicit run id, or one derived from every setting except `workdir`.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let mut material = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut material {
            m.remove("workdir");
            m.remove("run_id");
        }
        let digest = digest_of(&material).expect("value serializes");
        format!("run-{}", &digest[..12])
    }

    /// Pretty-printed with sorted keys.
    pub fn echo(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }

    /// Canonical single-line form, used for digests.
    pub fn canonical(&self) -> String {
        to_canonical_string(self).expect("config serializes")
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        crate::canonical::derive_seed(self.seed, stage)
    }

    fn check(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut require = |ok: bool, msg: &str| {
            if !ok {
                bad.push(msg.to_string());
            }
        };
        require(self.concurrency >= 1, "concurrency must be at least 1");
        require(!(self.products.dir.is_some() && self.products.demo.is_some()), "products.dir and products.demo are mutually exclusive");
        if let Some(d) = &self.products.demo {
            require(d.count >= 1 && d.images_per_product >= 1, "products.demo needs count and images_per_product of at least 1");
            require(d.size >= 16, "products.demo.size must be at least 16");
        }
        if let Some(ep) = self.backends.endpoint.as_deref().filter(|_| !self.backends.mock) {
            require(ep.starts_with("http://") || ep.starts_with("https://"), "backends.endpoint must be an http(s) URL");
        }
        require(self.backends.image_size >= 16, "backends.image_size must be at least 16");
        require(self.bank.size >= 1, "bank.size must be at least 1");
        require(!self.bank.reviewer.trim().is_empty(), "bank.reviewer must not be empty");
        require(self.bank.distractor_categories.iter().all(|c| !c.trim().is_empty()), "bank.distractor_categories must not contain empty names");
        let a = &self.augment;
        require(a.ratio[0] >= 1 && a.ratio[1] >= 1, "augment.ratio terms must be at least 1");
        require(a.frames_to_keep >= 1 && a.frames_to_keep < a.n_frames, "augment.frames_to_keep must be in 1..n_frames");
        require(a.prompts_per_source >= 1, "augment.prompts_per_source must be at least 1");
        require(a.caption_template.contains(TITLE_PLACEHOLDER), "augment.caption_template must contain {product_title}");
        require((0.0..=1.0).contains(&self.filter.iou_threshold), "filter.iou_threshold must be in [0, 1]");
        require(self.filter.keep_top >= 1, "filter.keep_top must be at least 1");
        let f = &self.finetune;
        require(!f.rare_tokens.is_empty(), "finetune.rare_tokens must not be empty");
        let invalid: Vec<&str> = f.rare_tokens.iter().filter(|t| !is_valid_token(t)).map(String::as_str).collect();
        require(invalid.is_empty(), &format!("finetune.rare_tokens must be lowercase ascii words: {}", invalid.join(", ")));
        require(f.sweep_size >= 1, "finetune.sweep_size must be at least 1");
        require(is_valid_lora_rank(f.lora_rank), "finetune.lora_rank must be a power of two in 1..=128");
        require(f.train_steps >= 1, "finetune.train_steps must be at least 1");
        require(f.learning_rate > 0.0 && f.learning_rate.is_finite(), "finetune.learning_rate must be positive");
        require(f.ablation_ranks.iter().all(|r| is_valid_lora_rank(*r)), "finetune.ablation_ranks must be powers of two in 1..=128");
        require(f.ablation_ranks.is_empty() == f.ablation_steps.is_empty(), "finetune.ablation_ranks and ablation_steps must be set together");
        require(f.ablation_steps.iter().all(|s| *s >= 1), "finetune.ablation_steps must be at least 1");
        require(self.generate.prompts_per_product >= 1 && self.generate.samples_per_prompt >= 1, "generate counts must be at least 1");
        require(self.rank.top_n >= 1, "rank.top_n must be at least 1");
        require(self.rank.threshold.is_finite(), "rank.threshold must be finite");
        require(self.eval.raters_needed >= 1, "eval.raters_needed must be at least 1");
        if let Some(id) = &self.run_id {
            require(!id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'), "run_id may only contain [A-Za-z0-9_-]");
        }
        bad
    }
}

/// Validates a config document; `base_dir` anchors its relative paths.
pub fn parse_config(text: &str, base_dir: &Path) -> ConfigResult<LoadedConfig> {
    let raw: Value = serde_json::from_str(text)?;
    if !raw.is_object() {
        return Err(ConfigError::Rejected { unknown: vec![], missing: vec![], invalid: vec!["config must be a JSON object".into()] });
    }
    let mut unknown = Vec::new();
    unknown_keys(&raw, &template(), "", &mut unknown);

    let mut missing = Vec::new();
    if lookup(&raw, "products.dir").is_none() && lookup(&raw, "products.demo").is_none() {
        missing.push("products.dir or products.demo".to_string());
    }
    let mock = lookup(&raw, "backends.mock").and_then(Value::as_bool).unwrap_or(false);
    if !mock && lookup(&raw, "backends.endpoint").is_none() {
        missing.push("backends.endpoint or backends.mock".to_string());
    }
    // Unknown keys are pruned so value problems are reported in the same pass.
    let mut pruned = raw;
    for path in &unknown {
        remove_path(&mut pruned, path);
    }
    let mut invalid = Vec::new();
    let mut warnings = Vec::new();
    let parsed = match serde_json::from_value::<RunConfig>(pruned) {
        Ok(mut config) => {
            if config.backends.mock && config.backends.endpoint.is_some() {
                warnings.push("backends.mock is set; ignoring backends.endpoint".to_string());
                config.backends.endpoint = None;
            }
            let duplicates: BTreeSet<&String> = config.finetune.rare_tokens.iter().collect();
            if duplicates.len() != config.finetune.rare_tokens.len() {
                warnings.push("finetune.rare_tokens has duplicates; keeping first occurrences".to_string());
                let mut seen = BTreeSet::new();
                config.finetune.rare_tokens.retain(|t| seen.insert(t.clone()));
            }
            invalid.extend(config.check());
            Some(config)
        }
        Err(e) => {
            invalid.push(e.to_string());
            None
        }
    };
    let config = match parsed {
        Some(c) if unknown.is_empty() && missing.is_empty() && invalid.is_empty() => c,
        _ => return Err(ConfigError::Rejected { unknown, missing, invalid }),
    };
    Ok(LoadedConfig { config, warnings, base_dir: base_dir.to_path_buf() })
}

fn remove_path(value: &mut Value, dotted: &str) {
    let (parent, leaf) = match dotted.rsplit_once('.') {
        Some((p, l)) => (p.split('.').try_fold(&mut *value, |v, k| v.get_mut(k)), l),
        None => (Some(value), dotted),
    };
    if let Some(Value::Object(map)) = parent {
        map.remove(leaf);
    }
}

pub fn load_config(path: &Path) -> ConfigResult<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"backends": {"mock": true}, "products": {"demo": {}}}"#;

    fn parse(text: &str) -> ConfigResult<LoadedConfig> {
        parse_config(text, Path::new("/cfg"))
    }

    #[test]
    fn minimal_config_resolves_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.config.augment.ratio, [2, 1]);
        assert_eq!(c.config.filter.iou_threshold, 0.85);
        assert_eq!(c.config.rank.top_n, 4);
        assert_eq!(c.config.rank.threshold, 1.6);
        assert_eq!(c.config.augment.n_frames, 8);
        assert_eq!(c.config.finetune.lora_rank, 64);
        assert_eq!(c.config.bank.size, 50);
        assert_eq!(c.workdir(), Path::new("/cfg/work"));
        assert!(c.warnings.is_empty());
        let echo = c.config.echo();
        for key in ["\"iou_threshold\": 0.85", "\"top_n\": 4", "\"ratio\": [", "\"learning_rate\": 0.0001"] {
            assert!(echo.contains(key), "{key} missing from echo");
        }
    }

    #[test]
    fn echo_is_a_fixed_point() {
        for text in [MINIMAL, r#"{"backends": {"mock": true, "endpoint": "http://x"}, "products": {"dir": "p"}, "seed": 9, "rank": {"top_n": 2}}"#] {
            let first = parse(text).unwrap().config.echo();
            let second = parse(&first).unwrap().config.echo();
            assert_eq!(first, second);
        }
    }

    #[test]
    fn unknown_keys_named_by_path() {
        let err = parse(r#"{"backends": {"mock": true}, "products": {"demo": {"colour": 1}}, "fooo": 1, "rank": {"topn": 3}}"#).unwrap_err();
        match err {
            ConfigError::Rejected { unknown, .. } => assert_eq!(unknown, ["fooo", "products.demo.colour", "rank.topn"]),
            other => panic!("unexpected {other}"),
        }
        assert!(parse(r#"{"backends": {"mock": true}, "products": {"demo": {}}, "fooo": 1}"#).unwrap_err().to_string().contains("fooo"));
    }

    #[test]
    fn missing_keys_listed_together() {
        match parse("{}").unwrap_err() {
            ConfigError::Rejected { missing, .. } => assert_eq!(missing.len(), 2),
            other => panic!("unexpected {other}"),
        }
        match parse(r#"{"backends": {"mock": false}, "products": {"demo": null}}"#).unwrap_err() {
            ConfigError::Rejected { missing, .. } => assert_eq!(missing.len(), 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mock_wins_over_endpoint() {
        let c = parse(r#"{"backends": {"mock": true, "endpoint": "http://models:9000"}, "products": {"demo": {}}}"#).unwrap();
        assert_eq!(c.config.backends.endpoint, None);
        assert_eq!(c.warnings.len(), 1);
        let real = parse(r#"{"backends": {"endpoint": "http://models:9000"}, "products": {"demo": {}}}"#).unwrap();
        assert_eq!(real.config.backends.endpoint.as_deref(), Some("http://models:9000"));
    }

    #[test]
    fn semantic_problems_all_reported() {
        let err = parse(r#"{"backends": {"mock": true}, "products": {"demo": {}}, "augment": {"frames_to_keep": 8, "ratio": [0, 1]}, "finetune": {"lora_rank": 3, "rare_tokens": ["Bad Token"]}}"#)
            .unwrap_err();
        match err {
            ConfigError::Rejected { invalid, .. } => assert_eq!(invalid.len(), 4, "{invalid:?}"),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse(r#"{"backends": {"mock": "yes"}, "products": {"demo": {}}}"#), Err(ConfigError::Rejected { .. })));
        assert!(matches!(parse("[1]"), Err(ConfigError::Rejected { .. })));
        assert!(matches!(parse("{"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn run_id_ignores_workdir_but_not_seed() {
        let a = parse(r#"{"backends": {"mock": true}, "products": {"demo": {}}, "workdir": "a"}"#).unwrap().config;
        let b = parse(r#"{"backends": {"mock": true}, "products": {"demo": {}}, "workdir": "b"}"#).unwrap().config;
        let c = parse(r#"{"backends": {"mock": true}, "products": {"demo": {}}, "seed": 1}"#).unwrap().config;
        assert_eq!(a.run_id(), b.run_id());
        assert_ne!(a.run_id(), c.run_id());
        let named = parse(r#"{"backends": {"mock": true}, "products": {"demo": {}}, "run_id": "r1"}"#).unwrap().config;
        assert_eq!(named.run_id(), "r1");
    }
}
