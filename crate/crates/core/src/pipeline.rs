//! Stage orchestration for a run: ingest, bank, augment, filter, assemble,
//! train, generate, rank, report.
//!
//! Each product keeps one manifest per run. Every stage appends its records
//! and the manifest is saved before the next product or stage starts, so a
//! failed run still leaves a consistent, resumable manifest behind. A later
//! invocation may request a suffix of the stages; prerequisites are satisfied
//! either by this invocation or by what the manifests already record.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::augmentation::{enforce_ratio, AugmentError, Augmenter};
use crate::backend::http::HttpBackend;
use crate::backend::mock::MockSuite;
use crate::backend::{wait_for_job, BackendError, Backends, RetryPolicy};
use crate::canonical::{derive_id, derive_seed, digest_of};
use crate::config::{ConfigError, LoadedConfig, RunConfig};
use crate::demo::demo_products;
use crate::filtering::{
    compute_metric_vector, filter_by_iou, select_top_rated, write_report, FilterError, IouCandidate, MetricInput,
    ReferenceSet, ReportRow, ScoredAsset,
};
use crate::finetune::{assemble_dataset, emit_ablation_grid, select_token, spec_path, token_sweep, write_spec, FinetuneError};
use crate::human_eval::{rater_verdict, EvalError, EvalService, PANEL_SIZE};
use crate::manifest::{FilteredItem, ManifestError, PipelineManifest, StageRecord};
use crate::model::{AssetRole, ImageAsset, MetricKey, MetricVector, ProductRecord, Provenance, TrainingDatasetSpec};
use crate::prompt_bank::{classify_category, BankError, PromptBank};
use crate::ranking::{build_metrics_report, correlation_report, rank_generated, RankError, RankOutcome};
use crate::raster::{Mask, Raster};
use crate::store::{AssetStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Bank,
    Augment,
    Filter,
    Assemble,
    Train,
    Generate,
    Rank,
    Report,
}

impl Stage {
    /// Execution order.
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Bank,
        Stage::Augment,
        Stage::Filter,
        Stage::Assemble,
        Stage::Train,
        Stage::Generate,
        Stage::Rank,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Bank => "bank",
            Stage::Augment => "augment",
            Stage::Filter => "filter",
            Stage::Assemble => "assemble",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Rank => "rank",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.as_str() == name)
    }

    /// The stage whose outputs this one reads.
    pub fn prerequisite(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("stage listed");
        i.checked_sub(1).map(|p| Stage::ALL[p])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parses a comma-separated stage list into execution order, dropping duplicates.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, PipelineError> {
    let mut out = BTreeSet::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.insert(Stage::parse(name).ok_or_else(|| PipelineError::UnknownStage(name.to_string()))?);
    }
    if out.is_empty() {
        return Err(PipelineError::UnknownStage(list.to_string()));
    }
    Ok(out.into_iter().collect())
}

/// Failure inside one stage.
#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown stage {0:?}; expected a comma-separated subset of ingest,bank,augment,filter,assemble,train,generate,rank,report")]
    UnknownStage(String),
    #[error("stage {stage} needs {needs}, which is neither requested nor recorded for run {run_id}")]
    Dependency { stage: Stage, needs: Stage, run_id: String },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("stage {stage} failed for {product}: {source}")]
    Stage { stage: Stage, product: String, source: StageError },
}

impl PipelineError {
    /// 2 for configuration and usage problems, 1 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Stage { .. } => 1,
            _ => 2,
        }
    }
}

type StageResult<T> = Result<T, StageError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io { path: path.to_path_buf(), source }
}

/// What a run invocation did.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub stages: Vec<Stage>,
    pub products: Vec<String>,
    /// Manifest content hashes per product after the run.
    pub content_hashes: BTreeMap<String, Vec<String>>,
    /// Ranked generated images per product, best first.
    pub ranked: BTreeMap<String, Vec<String>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProductFile {
    title: String,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// A generated image not yet stored.
type Sample = (ImageAsset, Raster);

pub struct Pipeline {
    loaded: LoadedConfig,
    run_id: String,
    workdir: PathBuf,
    store: Arc<AssetStore>,
    bank: PromptBank,
    backends: Backends,
}

impl Pipeline {
    /// Opens the workdir and builds backends from the config.
    pub fn new(loaded: LoadedConfig) -> Result<Self, PipelineError> {
        Self::build(loaded, None)
    }

    /// Like [`new`](Self::new) with caller-supplied backends.
    pub fn with_backends(loaded: LoadedConfig, backends: Backends) -> Result<Self, PipelineError> {
        Self::build(loaded, Some(backends))
    }

    fn build(loaded: LoadedConfig, backends: Option<Backends>) -> Result<Self, PipelineError> {
        let workdir = loaded.workdir();
        let setup = |e: &dyn fmt::Display| PipelineError::Setup(e.to_string());
        let store = Arc::new(AssetStore::open(workdir.join("store")).map_err(|e| setup(&e))?);
        let bank = PromptBank::open(workdir.join("bank")).map_err(|e| setup(&e))?;
        let cfg = &loaded.config;
        let backends = match backends {
            Some(b) => b,
            None if cfg.backends.mock => {
                let s = cfg.backends.image_size;
                MockSuite { image_size: Some((s, s)), embed_dimension: Some(cfg.backends.embed_dimension), ..Default::default() }
                    .with_pixels(store.clone())
                    .into_backends()
            }
            None => {
                let endpoint = cfg.backends.endpoint.as_deref().ok_or_else(|| PipelineError::Setup("no backend endpoint".into()))?;
                let retry = RetryPolicy { max_retries: cfg.backends.max_retries, ..RetryPolicy::default() };
                let timeout = Duration::from_millis(cfg.backends.timeout_ms);
                Backends::http(HttpBackend::with_options(endpoint, retry, timeout, cfg.backends.embed_dimension).map_err(|e| setup(&e))?)
            }
        };
        let run_id = loaded.run_id();
        Ok(Self { loaded, run_id, workdir, store, bank, backends })
    }

    pub fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn store(&self) -> &AssetStore {
        &self.store
    }

    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn run_dir(&self) -> PathBuf {
        self.workdir.join("runs").join(&self.run_id)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.workdir.join("eval")
    }

    pub fn manifest(&self, product_id: &str) -> Option<PipelineManifest> {
        self.store.load_manifest(product_id, &self.run_id).ok().flatten()
    }

    fn seed_for(&self, stage: Stage, key: &str) -> u64 {
        derive_seed(self.config().stage_seed(stage.as_str()), key)
    }

    fn augmenter(&self) -> Augmenter<'_> {
        Augmenter::new(&self.store, &self.backends, &self.run_id).with_concurrency(self.config().concurrency)
    }

    /// Products that completed ingest in this run, sorted.
    pub fn ingested_products(&self) -> Vec<String> {
        self.store
            .product_ids()
            .unwrap_or_default()
            .into_iter()
            .filter(|p| self.manifest(p).is_some_and(|m| recorded(&m, Stage::Ingest)))
            .collect()
    }

    fn check_dependencies(&self, stages: &[Stage]) -> Result<(), PipelineError> {
        let products = self.ingested_products();
        let manifests: Vec<PipelineManifest> = products.iter().filter_map(|p| self.manifest(p)).collect();
        for &stage in stages {
            let Some(needs) = stage.prerequisite() else { continue };
            if stages.contains(&needs) {
                continue;
            }
            if manifests.is_empty() || !manifests.iter().all(|m| recorded(m, needs)) {
                return Err(PipelineError::Dependency { stage, needs, run_id: self.run_id.clone() });
            }
        }
        Ok(())
    }

    /// Runs `stages` in execution order.
    pub fn run(&self, stages: &[Stage]) -> Result<RunSummary, PipelineError> {
        let stages: Vec<Stage> = stages.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        self.check_dependencies(&stages)?;
        let mut summary = RunSummary {
            run_id: self.run_id.clone(),
            stages: stages.clone(),
            warnings: self.loaded.warnings.clone(),
            ..Default::default()
        };
        let mut products: Vec<ProductRecord> = Vec::new();
        if !stages.contains(&Stage::Ingest) {
            for id in self.ingested_products() {
                let p = self.store.load_product(&id).map_err(|e| PipelineError::Setup(e.to_string()))?;
                products.push(p);
            }
        }
        for &stage in &stages {
            info!("run {}: stage {stage}", self.run_id);
            match stage {
                Stage::Ingest => products = self.ingest()?,
                Stage::Bank => self.bank_stage(&products)?,
                Stage::Filter => {
                    let rows = self.per_product(stage, &products, |p, m| self.filter_stage(p, m))?;
                    let path = self.run_dir().join("filter_report.csv");
                    write_report(&path, &rows.concat()).map_err(|e| stage_err(stage, "run", e.into()))?;
                }
                Stage::Rank => {
                    let rows = self.per_product(stage, &products, |p, m| self.rank_stage(p, m))?;
                    let path = self.run_dir().join("rank_report.csv");
                    write_report(&path, &rows.concat()).map_err(|e| stage_err(stage, "run", e.into()))?;
                }
                Stage::Report => self.report_stage(&products)?,
                Stage::Augment => {
                    self.per_product(stage, &products, |p, m| self.augment_stage(p, m))?;
                }
                Stage::Assemble => {
                    self.per_product(stage, &products, |p, m| self.assemble_stage(p, m))?;
                }
                Stage::Train => {
                    self.per_product(stage, &products, |p, m| self.train_stage(p, m))?;
                }
                Stage::Generate => {
                    self.per_product(stage, &products, |p, m| self.generate_stage(p, m))?;
                }
            }
        }
        for p in &products {
            if let Some(m) = self.manifest(&p.product_id) {
                summary.content_hashes.insert(p.product_id.clone(), m.content_hashes().iter().map(|h| h.to_string()).collect());
                if let Some(r) = m.last_stage(Stage::Rank.as_str()) {
                    summary.ranked.insert(p.product_id.clone(), r.outputs.clone());
                }
            }
            summary.products.push(p.product_id.clone());
        }
        Ok(summary)
    }

    /// Appends `records` to the product's manifest and saves it.
    fn commit(&self, product_id: &str, records: Vec<StageRecord>) -> StageResult<PipelineManifest> {
        let mut manifest = self
            .store
            .load_manifest(product_id, &self.run_id)?
            .unwrap_or_else(|| PipelineManifest::new(&self.run_id, product_id));
        for r in records {
            manifest.push(r)?;
        }
        self.store.save_manifest(&manifest)?;
        Ok(manifest)
    }

    /// Runs `f` for each product in turn, committing its records. `f` also
    /// returns run-level report rows.
    fn per_product<F>(&self, stage: Stage, products: &[ProductRecord], f: F) -> Result<Vec<Vec<ReportRow>>, PipelineError>
    where
        F: Fn(&ProductRecord, &PipelineManifest) -> StageResult<(Vec<StageRecord>, Vec<ReportRow>)>,
    {
        let mut rows = Vec::with_capacity(products.len());
        for p in products {
            let id = &p.product_id;
            let result = (|| {
                let manifest = self.store.load_manifest(id, &self.run_id)?.unwrap_or_else(|| PipelineManifest::new(&self.run_id, id));
                let (records, r) = f(p, &manifest)?;
                self.commit(id, records)?;
                Ok(r)
            })();
            rows.push(result.map_err(|e| stage_err(stage, id, e))?);
        }
        Ok(rows)
    }

    // ---- ingest ----

    fn ingest(&self) -> Result<Vec<ProductRecord>, PipelineError> {
        let cfg = self.config();
        let catalogue: Vec<(ProductRecord, Vec<Sample>)> = if let Some(demo) = &cfg.products.demo {
            demo_products(demo.count, demo.images_per_product, demo.size, 0).into_iter().map(|d| (d.product, d.images)).collect()
        } else {
            let dir = self.loaded.products_dir().ok_or_else(|| PipelineError::Setup("no product source".into()))?;
            self.read_product_dir(&dir).map_err(|e| stage_err(Stage::Ingest, "catalogue", e))?
        };
        if catalogue.is_empty() {
            return Err(stage_err(Stage::Ingest, "catalogue", StageError::Input("product source holds no products".into())));
        }
        let mut products = Vec::with_capacity(catalogue.len());
        for (product, images) in catalogue {
            let id = product.product_id.clone();
            let result = (|| -> StageResult<()> {
                for (asset, raster) in &images {
                    self.store.put_asset(asset, raster)?;
                }
                self.store.store_product(&product)?;
                let record = StageRecord::new(Stage::Ingest.as_str())
                    .outputs(product.base_asset_ids.clone())
                    .snapshot(&json!({ "title": product.title, "category": product.category, "metadata": product.metadata }));
                self.commit(&id, vec![record])?;
                Ok(())
            })();
            result.map_err(|e| stage_err(Stage::Ingest, &id, e))?;
            products.push(product);
        }
        Ok(products)
    }

    fn read_product_dir(&self, dir: &Path) -> StageResult<Vec<(ProductRecord, Vec<Sample>)>> {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        let mut out = Vec::with_capacity(subdirs.len());
        for sub in subdirs {
            let product_id = sub.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let meta_path = sub.join("product.json");
            let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            let meta: ProductFile =
                serde_json::from_str(&text).map_err(|e| StageError::Input(format!("{}: {e}", meta_path.display())))?;
            let mut pngs: Vec<PathBuf> = std::fs::read_dir(&sub)
                .map_err(io_err(&sub))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            pngs.sort();
            if pngs.is_empty() {
                return Err(StageError::Input(format!("product {product_id} has no PNG images")));
            }
            let mut images = Vec::with_capacity(pngs.len());
            for png in &pngs {
                let raster = Raster::from_png(&std::fs::read(png).map_err(io_err(png))?)?;
                let name = png.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let id = derive_id("base", "ingest", &product_id, &name, 0, 0);
                images.push((ImageAsset::new(id, &product_id, AssetRole::Base, raster.width(), raster.height()), raster));
            }
            let mut product = ProductRecord {
                product_id: product_id.clone(),
                title: meta.title,
                category: meta.category.unwrap_or_default(),
                metadata: meta.metadata,
                base_asset_ids: images.iter().map(|(a, _)| a.asset_id.clone()).collect(),
            };
            if product.category.trim().is_empty() {
                product.category = classify_category(&product, self.backends.captioner.as_ref(), Some(&images[0].1))?;
            }
            out.push((product, images));
        }
        Ok(out)
    }

    // ---- bank ----

    fn bank_stage(&self, products: &[ProductRecord]) -> Result<(), PipelineError> {
        let cfg = &self.config().bank;
        let categories: BTreeSet<&str> =
            products.iter().map(|p| p.category.as_str()).chain(cfg.distractor_categories.iter().map(String::as_str)).collect();
        for &category in &categories {
            let seed = self.seed_for(Stage::Bank, category);
            let result = (|| -> StageResult<()> {
                self.bank.populate(category, cfg.size, self.backends.llm.as_ref(), seed)?;
                if cfg.auto_approve {
                    self.bank.approve_all(category, &cfg.reviewer)?;
                }
                Ok(())
            })();
            result.map_err(|e| stage_err(Stage::Bank, category, e))?;
        }
        for p in products {
            let result = (|| -> StageResult<()> {
                let mut status = BTreeMap::new();
                for c in std::iter::once(&p.category).chain(&cfg.distractor_categories) {
                    let entries = self.bank.entries(c)?;
                    let approved = entries.iter().filter(|e| e.status == crate::model::EntryStatus::Approved).count();
                    status.insert(c.clone(), json!({ "entries": entries.len(), "approved": approved }));
                }
                if status[&p.category]["approved"] == 0 {
                    warn!("no approved prompts for {:?} yet; curate the bank before augmenting", p.category);
                }
                let record = StageRecord::new(Stage::Bank.as_str()).snapshot(&json!({ "bank": cfg, "categories": status }));
                self.commit(&p.product_id, vec![record])?;
                Ok(())
            })();
            result.map_err(|e| stage_err(Stage::Bank, &p.product_id, e))?;
        }
        Ok(())
    }

    // ---- augment ----

    fn augment_stage(&self, p: &ProductRecord, _: &PipelineManifest) -> StageResult<(Vec<StageRecord>, Vec<ReportRow>)> {
        let cfg = &self.config().augment;
        let seed = self.seed_for(Stage::Augment, &p.product_id);
        let aug = self.augmenter();
        let snapshot = json!({ "augment": cfg, "seed": seed });

        let views = aug.harvest_novel_views(p, cfg.n_frames, cfg.frames_to_keep, seed)?;
        let mut sources = p.base_asset_ids.clone();
        sources.extend(views.ids());
        let contexts = aug.new_context_batch(&sources, &p.category, &self.bank, cfg.prompts_per_source, seed)?;

        let mut positives = sources.clone();
        positives.extend(contexts.ids());
        let (captions, uncaptioned) = aug.caption_assets(&positives, &cfg.caption_template, p)?;
        let captioned: Vec<String> = captions.iter().map(|c| c.asset_id.clone()).collect();

        let [rp, rn] = cfg.ratio;
        let target = captioned.len() * rn as usize / rp as usize;
        let distractors: Vec<String> =
            self.config().bank.distractor_categories.iter().filter(|c| **c != p.category).cloned().collect();
        let n_counterfactual = if distractors.is_empty() { 0 } else { target / 2 };
        let negatives = aug.generate_negatives(p, &captioned, target - n_counterfactual, seed)?;
        let counterfactuals = aug.counterfactual_batch(&p.base_asset_ids, &distractors, &self.bank, n_counterfactual, seed)?;

        let caption_ids: BTreeMap<&str, &str> = captions.iter().map(|c| (c.asset_id.as_str(), c.caption_id.as_str())).collect();
        let records = vec![
            StageRecord::new("augment/novel_views")
                .inputs(p.base_asset_ids.clone())
                .outputs(views.ids())
                .filtered(views.skipped)
                .snapshot(&snapshot),
            StageRecord::new("augment/new_context").inputs(sources).outputs(contexts.ids()).filtered(contexts.skipped).snapshot(&snapshot),
            StageRecord::new("augment/captions")
                .inputs(positives)
                .filtered(uncaptioned)
                .snapshot(&json!({ "template": cfg.caption_template, "captions": caption_ids })),
            StageRecord::new("augment/negatives")
                .inputs(captioned)
                .outputs(negatives.ids())
                .filtered(negatives.skipped)
                .snapshot(&json!({ "target": target, "seed": seed })),
            StageRecord::new("augment/counterfactuals")
                .inputs(p.base_asset_ids.clone())
                .outputs(counterfactuals.ids())
                .filtered(counterfactuals.skipped)
                .snapshot(&json!({ "distractors": distractors, "count": n_counterfactual, "seed": seed })),
        ];
        Ok((records, Vec::new()))
    }

    // ---- shared helpers ----

    /// Base photos with their masks, segmenting any that lack one.
    fn references(&self, p: &ProductRecord) -> StageResult<Vec<(Raster, Option<Mask>)>> {
        p.base_asset_ids
            .iter()
            .map(|id| {
                let loaded = self.store.load(id)?;
                let mask = match loaded.mask {
                    Some(m) => Some(m),
                    None => Some(self.backends.segmenter.segment(&loaded.raster, &p.category)?),
                };
                Ok((loaded.raster, mask.filter(|m| !m.is_empty())))
            })
            .collect()
    }

    fn reference_set(&self, refs: &[(Raster, Option<Mask>)]) -> StageResult<ReferenceSet> {
        let inputs: Vec<MetricInput<'_>> = refs.iter().map(|(r, m)| MetricInput::new(r, m.as_ref())).collect();
        Ok(ReferenceSet::embed(self.backends.embedder.as_ref(), &inputs)?)
    }

    /// Scores in-memory samples against the product and ranks them.
    fn score_samples(&self, p: &ProductRecord, samples: &[Sample]) -> StageResult<RankOutcome> {
        let refs = self.references(p)?;
        let reference_set = self.reference_set(&refs)?;
        let masks: Vec<Option<Mask>> = samples
            .iter()
            .map(|(_, r)| self.backends.segmenter.segment(r, &p.category).map(|m| Some(m).filter(|m| !m.is_empty())))
            .collect::<Result<_, _>>()?;
        let inputs: Vec<(String, MetricInput<'_>)> = samples
            .iter()
            .zip(&masks)
            .map(|((a, r), m)| (a.asset_id.clone(), MetricInput::new(r, m.as_ref())))
            .collect();
        let prompts: BTreeMap<String, String> =
            samples.iter().map(|(a, _)| (a.asset_id.clone(), a.prompt.clone().unwrap_or_default())).collect();
        let cfg = &self.config().rank;
        Ok(rank_generated(
            self.backends.embedder.as_ref(),
            &inputs,
            &reference_set,
            &prompts,
            cfg.top_n,
            cfg.threshold,
            self.config().concurrency,
        )?)
    }

    // ---- filter ----

    fn filter_stage(&self, p: &ProductRecord, m: &PipelineManifest) -> StageResult<(Vec<StageRecord>, Vec<ReportRow>)> {
        let cfg = &self.config().filter;
        let contexts = outputs(m, "augment/new_context");
        let mut candidates = Vec::with_capacity(contexts.len());
        let mut loaded = BTreeMap::new();
        for id in &contexts {
            let asset = self.store.load(id)?;
            let outpainted = self.backends.segmenter.segment(&asset.raster, &p.category)?;
            candidates.push(IouCandidate {
                asset_id: id.clone(),
                outpainted_mask: Some(outpainted.clone()),
                reference_mask: asset.mask.clone(),
            });
            loaded.insert(id.clone(), (asset, outpainted));
        }
        let iou = filter_by_iou(&candidates, cfg.iou_threshold);
        let mut rows = iou.report;
        let mut rejected = iou.rejected;

        let refs = self.references(p)?;
        let mut kept = Vec::new();
        if !iou.kept.is_empty() {
            let reference_set = self.reference_set(&refs)?;
            let mut scored = Vec::with_capacity(iou.kept.len());
            for id in &iou.kept {
                let (asset, mask) = &loaded[id];
                let input = MetricInput::new(&asset.raster, Some(mask));
                let prompt = asset.asset.prompt.as_deref().unwrap_or_default();
                scored.push(ScoredAsset::new(id, compute_metric_vector(self.backends.embedder.as_ref(), input, &reference_set, prompt)?));
            }
            let top = select_top_rated(&scored, cfg.keep_top, MetricKey::Aggregate);
            let cutoff = top.last().map(|s| s.metrics.aggregate).unwrap_or(f64::NEG_INFINITY);
            let top_ids: BTreeSet<&str> = top.iter().map(|s| s.asset_id.as_str()).collect();
            for s in &scored {
                let keep = top_ids.contains(s.asset_id.as_str());
                let decision = if keep { "kept" } else { "rejected" };
                rows.push(ReportRow::new(&s.asset_id, "aggregate", Some(s.metrics.aggregate), decision, cutoff));
                if !keep {
                    rejected.push(FilteredItem::new(&s.asset_id, format!("outside top {} by aggregate", cfg.keep_top), Some(s.metrics.aggregate)));
                }
            }
            kept = top.into_iter().map(|s| s.asset_id).collect();
            kept.sort();
        }
        let record = StageRecord::new(Stage::Filter.as_str())
            .inputs(contexts)
            .outputs(kept)
            .filtered(rejected)
            .snapshot(&json!({ "filter": cfg }));
        Ok((vec![record], rows))
    }

    // ---- assemble / train ----

    /// Positives and negatives that survive the ratio, with the dropped ones.
    fn training_split(&self, p: &ProductRecord, m: &PipelineManifest) -> StageResult<(Vec<ImageAsset>, Vec<ImageAsset>, Vec<String>)> {
        let mut candidates = p.base_asset_ids.clone();
        candidates.extend(outputs(m, "augment/novel_views"));
        candidates.extend(outputs(m, Stage::Filter.as_str()));
        let mut positives = Vec::new();
        for id in candidates {
            let a = self.store.load_asset(&id)?;
            if a.caption_id.is_some() {
                positives.push(a);
            }
        }
        let mut negatives = Vec::new();
        for id in outputs(m, "augment/negatives").into_iter().chain(outputs(m, "augment/counterfactuals")) {
            negatives.push(self.store.load_asset(&id)?);
        }
        let [rp, rn] = self.config().augment.ratio;
        let (kp, kn) = enforce_ratio(&positives, &negatives, rp, rn);
        let kept: BTreeSet<&str> = kn.iter().map(|a| a.asset_id.as_str()).collect();
        let dropped = negatives.iter().filter(|a| !kept.contains(a.asset_id.as_str())).map(|a| a.asset_id.clone()).collect();
        Ok((kp, kn, dropped))
    }

    fn build_spec(&self, p: &ProductRecord, token: &str, positives: &[ImageAsset], negatives: &[ImageAsset]) -> StageResult<TrainingDatasetSpec> {
        let mut captions = BTreeMap::new();
        for a in positives.iter().chain(negatives) {
            if let Some(c) = self.store.caption_for(&a.asset_id)? {
                captions.insert(a.asset_id.clone(), c.text);
            }
        }
        let [rp, rn] = self.config().augment.ratio;
        Ok(assemble_dataset(p, token, positives, negatives, &captions, (rp, rn), self.config().finetune.params())?)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.workdir).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    fn assemble_stage(&self, p: &ProductRecord, m: &PipelineManifest) -> StageResult<(Vec<StageRecord>, Vec<ReportRow>)> {
        let cfg = &self.config().finetune;
        let (kp, kn, dropped) = self.training_split(p, m)?;
        let token = select_token(p, &cfg.rare_tokens, self.seed_for(Stage::Assemble, &p.product_id))?;
        let spec = self.build_spec(p, &token, &kp, &kn)?;
        let run_dir = self.run_dir();
        let spec_file = write_spec(&run_dir, &spec)?;
        let mut ablation = Vec::new();
        if !cfg.ablation_ranks.is_empty() {
            for s in emit_ablation_grid(&spec, &cfg.ablation_ranks, &cfg.ablation_steps)? {
                let dir = run_dir.join(&p.product_id).join("ablation");
                let path = dir.join(format!("train_spec_{}_r{}_s{}.spec", s.token, s.lora_rank, s.train_steps));
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                std::fs::write(&path, crate::canonical::to_canonical_string(&s)?).map_err(io_err(&path))?;
                ablation.push(self.relative(&path));
            }
        }
        let inputs: Vec<String> = kp.iter().chain(&kn).map(|a| a.asset_id.clone()).chain(dropped.iter().cloned()).collect();
        let record = StageRecord::new(Stage::Assemble.as_str())
            .inputs(inputs)
            .outputs(spec.positive_asset_ids.iter().chain(&spec.negative_asset_ids).cloned())
            .filtered(dropped.iter().map(|id| FilteredItem::new(id, "over the positive:negative ratio", None)).collect())
            .snapshot(&json!({
                "token": token,
                "spec_digest": digest_of(&spec)?,
                "spec_file": self.relative(&spec_file),
                "ablation_specs": ablation,
                "finetune": cfg,
            }));
        Ok((vec![record], Vec::new()))
    }

    fn train(&self, spec: &TrainingDatasetSpec) -> StageResult<String> {
        let cfg = &self.config().finetune;
        let job = self.backends.trainer.submit_training_job(spec)?;
        Ok(wait_for_job(self.backends.trainer.as_ref(), &job, Duration::from_millis(cfg.poll_interval_ms), cfg.max_polls)?)
    }

    fn train_stage(&self, p: &ProductRecord, m: &PipelineManifest) -> StageResult<(Vec<StageRecord>, Vec<ReportRow>)> {
        let cfg = &self.config().finetune;
        let assembled = m.last_stage(Stage::Assemble.as_str()).ok_or_else(|| StageError::Input("no assemble record".into()))?;
        let token = snapshot_str(assembled, "token")?;
        let spec_file = spec_path(&self.run_dir(), &p.product_id, &token);
        let text = std::fs::read_to_string(&spec_file).map_err(io_err(&spec_file))?;
        let spec: TrainingDatasetSpec = serde_json::from_str(&text)?;

        let (token, model_ref, sweep) = if cfg.sweep_size > 1 {
            let (kp, kn): (Vec<ImageAsset>, Vec<ImageAsset>) = (
                spec.positive_asset_ids.iter().map(|id| self.store.load_asset(id)).collect::<Result<_, _>>()?,
                spec.negative_asset_ids.iter().map(|id| self.store.load_asset(id)).collect::<Result<_, _>>()?,
            );
            let models = Mutex::new(BTreeMap::new());
            let seed = self.seed_for(Stage::Train, &p.product_id);
            let outcome = token_sweep(p, &cfg.rare_tokens, cfg.sweep_size, seed, self.config().concurrency, |t| {
                let attempt = || -> StageResult<Vec<f64>> {
                    let s = self.build_spec(p, t, &kp, &kn)?;
                    let model_ref = self.train(&s)?;
                    let samples = self.draw_samples(p, t, &model_ref)?;
                    let ranked = self.score_samples(p, &samples)?.ranked;
                    models.lock().expect("sweep lock").insert(t.to_string(), (s, model_ref));
                    Ok(ranked.iter().map(|r| r.metrics.aggregate).collect())
                };
                attempt().map_err(|e| e.to_string())
            })?;
            let (best_spec, model_ref) = models.into_inner().expect("sweep lock").remove(&outcome.best_token).expect("best token trained");
            write_spec(&self.run_dir(), &best_spec)?;
            let scores: Vec<_> = outcome.scores.iter().map(|(t, s)| json!({ "token": t, "score": s.is_finite().then_some(*s) })).collect();
            (outcome.best_token, model_ref, json!({ "scores": scores, "failures": outcome.failures }))
        } else {
            let model_ref = self.train(&spec)?;
            (token, model_ref, serde_json::Value::Null)
        };
        let record = StageRecord::new(Stage::Train.as_str())
            .inputs(spec.positive_asset_ids.iter().chain(&spec.negative_asset_ids).cloned())
            .snapshot(&json!({ "token": token, "model_ref": model_ref, "trainer": self.backends.trainer.name(), "sweep": sweep }));
        Ok((vec![record], Vec::new()))
    }

    // ---- generate / rank ----

    fn draw_samples(&self, p: &ProductRecord, token: &str, model_ref: &str) -> StageResult<Vec<Sample>> {
        let cfg = &self.config().generate;
        let seed = self.seed_for(Stage::Generate, &p.product_id);
        let contexts = self.bank.get_prompts(&p.category, cfg.prompts_per_product, seed)?;
        let mut out = Vec::new();
        for (i, context) in contexts.iter().enumerate() {
            let prompt = generation_prompt(token, &p.category, context);
            let s = derive_seed(seed, &format!("prompt/{i}"));
            let images = self.backends.sampler.sample_from_model(model_ref, &prompt, s, cfg.samples_per_prompt)?;
            for (j, raster) in images.into_iter().enumerate() {
                let id = derive_id("gen", &self.run_id, &p.product_id, &format!("generate/{token}"), seed, i * cfg.samples_per_prompt + j);
                let asset = ImageAsset::new(id, &p.product_id, AssetRole::Generated, raster.width(), raster.height())
                    .with_prompt(prompt.as_str())
                    .with_provenance(
                        Provenance::new(self.backends.sampler.name(), s)
                            .with_param("model_ref", model_ref)
                            .with_param("token", token)
                            .with_param("sample_index", j.to_string()),
                    );
                out.push((asset, raster));
            }
        }
        Ok(out)
    }

    fn generate_stage(&self, p: &ProductRecord, m: &PipelineManifest) -> StageResult<(Vec<StageRecord>, Vec<ReportRow>)> {
        let trained = m.last_stage(Stage::Train.as_str()).ok_or_else(|| StageError::Input("no train record".into()))?;
        let token = snapshot_str(trained, "token")?;
        let model_ref = snapshot_str(trained, "model_ref")?;
        let samples = self.draw_samples(p, &token, &model_ref)?;
        let mut ids = Vec::with_capacity(samples.len());
        for (asset, raster) in &samples {
            ids.push(self.store.put_asset(asset, raster)?);
        }
        let record = StageRecord::new(Stage::Generate.as_str())
            .outputs(ids)
            .snapshot(&json!({ "token": token, "model_ref": model_ref, "generate": self.config().generate }));
        Ok((vec![record], Vec::new()))
    }

    fn rank_stage(&self, p: &ProductRecord, m: &PipelineManifest) -> StageResult<(Vec<StageRecord>, Vec<ReportRow>)> {
        let generated = outputs(m, Stage::Generate.as_str());
        let mut samples = Vec::with_capacity(generated.len());
        for id in &generated {
            let l = self.store.load(id)?;
            samples.push((l.asset, l.raster));
        }
        let outcome = if samples.is_empty() { RankOutcome { scored: vec![], ranked: vec![] } } else { self.score_samples(p, &samples)? };
        let cfg = &self.config().rank;
        let ranked: Vec<String> = outcome.ranked.iter().map(|s| s.asset_id.clone()).collect();
        let ranked_set: BTreeSet<&str> = ranked.iter().map(String::as_str).collect();
        let filtered = outcome
            .scored
            .iter()
            .filter(|s| !ranked_set.contains(s.asset_id.as_str()))
            .map(|s| {
                let reason = if s.metrics.aggregate < cfg.threshold { "below threshold" } else { "beyond top n" };
                FilteredItem::new(&s.asset_id, reason, Some(s.metrics.aggregate))
            })
            .collect();
        let scores: BTreeMap<&str, &MetricVector> = outcome.scored.iter().map(|s| (s.asset_id.as_str(), &s.metrics)).collect();
        let record = StageRecord::new(Stage::Rank.as_str())
            .inputs(generated.clone())
            .outputs(ranked.clone())
            .filtered(filtered)
            .snapshot(&json!({ "rank": cfg, "scores": scores }));
        Ok((vec![record], outcome.report_rows(cfg.threshold)))
    }

    // ---- report ----

    fn report_stage(&self, products: &[ProductRecord]) -> Result<(), PipelineError> {
        let err = |product: &str, e: StageError| stage_err(Stage::Report, product, e);
        let mut all = Vec::new();
        let mut top = Vec::new();
        let mut by_asset = BTreeMap::new();
        for p in products {
            let m = self.manifest(&p.product_id).ok_or_else(|| err(&p.product_id, StageError::Input("no manifest".into())))?;
            let rank = m.last_stage(Stage::Rank.as_str()).ok_or_else(|| err(&p.product_id, StageError::Input("no rank record".into())))?;
            let scores: BTreeMap<String, MetricVector> =
                serde_json::from_value(rank.config_snapshot["scores"].clone()).map_err(|e| err(&p.product_id, e.into()))?;
            all.extend(scores.values().copied());
            top.extend(rank.outputs.iter().filter_map(|id| scores.get(id).copied()));
            by_asset.extend(scores);
        }
        let report = build_metrics_report([("all generated", all.as_slice()), ("top ranked", top.as_slice())]);
        let mut text = format!("run: {}\n\n{}", self.run_id, report.to_text());
        text.push_str(&self.human_section(&by_asset).map_err(|e| err("run", e))?);
        let path = self.run_dir().join("metrics_table.txt");
        std::fs::create_dir_all(self.run_dir()).map_err(|e| err("run", StageError::Io { path: self.run_dir(), source: e }))?;
        std::fs::write(&path, &text).map_err(|e| err("run", StageError::Io { path: path.clone(), source: e }))?;

        for p in products {
            let m = self.manifest(&p.product_id).expect("checked above");
            let ranked = outputs(&m, Stage::Rank.as_str());
            let record = StageRecord::new(Stage::Report.as_str())
                .inputs(ranked)
                .snapshot(&json!({ "sections": report.sections.len(), "skipped": report.skipped }));
            self.commit(&p.product_id, vec![record]).map_err(|e| err(&p.product_id, e))?;
        }
        Ok(())
    }

    /// Pass rates and metric correlations, when ratings exist.
    fn human_section(&self, metrics: &BTreeMap<String, MetricVector>) -> StageResult<String> {
        if !self.eval_dir().join("ratings.log").exists() {
            return Ok(String::new());
        }
        let service = self.open_eval_service()?;
        let pass = service.report()?;
        let mut out = format!(
            "human evaluation ({} images judged, {} pending)\nper-image pass rate   {:.4}\nper-product pass rate {:.4}\n",
            pass.images_judged, pass.images_pending, pass.per_image_pass_rate, pass.per_product_pass_rate
        );
        let mut vectors = Vec::new();
        let mut human = Vec::new();
        for (id, v) in metrics {
            let ratings = service.ratings(id);
            if ratings.len() == PANEL_SIZE {
                vectors.push(*v);
                human.push(ratings.iter().filter(|r| rater_verdict(r)).count() as f64 / PANEL_SIZE as f64);
            }
        }
        if !vectors.is_empty() {
            out.push_str("pearson correlation with rater pass fraction\n");
            for (key, r) in correlation_report(&vectors, &human) {
                match r {
                    Ok(r) => out.push_str(&format!("{:<10} {r:>8.4}\n", key.label())),
                    Err(e) => out.push_str(&format!("{:<10} {:>8} ({e})\n", key.label(), "n/a")),
                }
            }
        }
        Ok(out)
    }

    fn open_eval_service(&self) -> StageResult<EvalService> {
        let store = AssetStore::open(self.store.root())?;
        let bank = PromptBank::open(self.bank.dir())?;
        Ok(EvalService::open(store, Some(bank), &self.eval_dir())?)
    }

    /// An eval service over this workdir with every ranked image of the run
    /// queued for rating. Returns the service and how many assets were newly queued.
    pub fn eval_service(&self) -> Result<(EvalService, usize), PipelineError> {
        let service = self.open_eval_service().map_err(|e| PipelineError::Setup(e.to_string()))?;
        let batched = service.batched_assets();
        let fresh: Vec<String> = self
            .ingested_products()
            .iter()
            .filter_map(|p| self.manifest(p))
            .flat_map(|m| outputs(&m, Stage::Rank.as_str()))
            .filter(|id| !batched.contains(id))
            .collect();
        if !fresh.is_empty() {
            service
                .create_batch(&fresh, self.config().eval.raters_needed)
                .map_err(|e| PipelineError::Setup(e.to_string()))?;
        }
        Ok((service, fresh.len()))
    }
}

fn stage_err(stage: Stage, product: &str, source: StageError) -> PipelineError {
    PipelineError::Stage { stage, product: product.to_string(), source }
}

/// Whether `stage` appears in `m`, counting sub-records such as `augment/captions`.
fn recorded(m: &PipelineManifest, stage: Stage) -> bool {
    let name = stage.as_str();
    m.records().iter().any(|r| r.stage_name == name || r.stage_name.strip_prefix(name).is_some_and(|rest| rest.starts_with('/')))
}

fn outputs(m: &PipelineManifest, stage_name: &str) -> Vec<String> {
    m.last_stage(stage_name).map(|r| r.outputs.clone()).unwrap_or_default()
}

fn snapshot_str(record: &StageRecord, key: &str) -> StageResult<String> {
    record.config_snapshot[key]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| StageError::Input(format!("{} record lacks {key}", record.stage_name)))
}

/// Inserts the token before the first mention of the category, or prefixes
/// the context with the subject phrase when the category is not mentioned.
pub fn generation_prompt(token: &str, category: &str, context: &str) -> String {
    match context.find(category) {
        Some(i) if !category.is_empty() => format!("{}{token} {}", &context[..i], &context[i..]),
        _ => format!("a {token} {category}, {context}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn config(dir: &Path, extra: &str) -> LoadedConfig {
        let text = format!(
            r#"{{"backends": {{"mock": true}}, "products": {{"demo": {{"count": 2, "images_per_product": 2, "size": 48}}}},
                "bank": {{"size": 8, "auto_approve": true}}, "augment": {{"n_frames": 5, "prompts_per_source": 2}},
                "generate": {{"prompts_per_product": 2, "samples_per_prompt": 2}}, "rank": {{"threshold": 0.0}},
                "seed": 42{extra}}}"#
        );
        parse_config(&text, dir).unwrap()
    }

    #[test]
    fn stage_lists() {
        assert_eq!(parse_stages("filter, augment,filter").unwrap(), [Stage::Augment, Stage::Filter]);
        assert!(matches!(parse_stages("augment,fooo"), Err(PipelineError::UnknownStage(s)) if s == "fooo"));
        assert!(parse_stages("").is_err());
        assert_eq!(Stage::Ingest.prerequisite(), None);
        assert_eq!(Stage::Rank.prerequisite(), Some(Stage::Generate));
        assert_eq!(PipelineError::UnknownStage("x".into()).exit_code(), 2);
    }

    #[test]
    fn prompts_carry_the_token() {
        assert_eq!(generation_prompt("zxq", "chair", "A chair standing in a loft."), "A zxq chair standing in a loft.");
        assert_eq!(generation_prompt("zxq", "chair", "A sofa in a loft."), "a zxq chair, A sofa in a loft.");
    }

    #[test]
    fn full_run_then_resume() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(config(dir.path(), "")).unwrap();
        let summary = pipeline.run(&Stage::ALL).unwrap();
        assert_eq!(summary.products.len(), 2);
        for (product, ranked) in &summary.ranked {
            assert!(!ranked.is_empty(), "{product} ranked nothing");
            assert!(ranked.len() <= 4);
        }
        let run_dir = pipeline.run_dir();
        for f in ["filter_report.csv", "rank_report.csv", "metrics_table.txt"] {
            assert!(run_dir.join(f).is_file(), "{f} missing");
        }
        let table = std::fs::read_to_string(run_dir.join("metrics_table.txt")).unwrap();
        assert!(table.contains("SegCLIP-I"));
        for p in &summary.products {
            let m = pipeline.manifest(p).unwrap();
            m.verify().unwrap();
            assert!(pipeline.store().missing_references(&m).is_empty());
            let spec = m.last_stage("assemble").unwrap();
            assert!(spec.outputs.len() >= 2);
        }

        let again = pipeline.run(&[Stage::Rank, Stage::Report]).unwrap();
        for (p, hashes) in &again.content_hashes {
            assert_eq!(&hashes[..summary.content_hashes[p].len()], summary.content_hashes[p].as_slice());
            assert_eq!(hashes.len(), summary.content_hashes[p].len() + 2);
        }
        assert_eq!(again.ranked, summary.ranked);
    }

    #[test]
    fn dependencies_fail_fast() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(config(dir.path(), "")).unwrap();
        let err = pipeline.run(&[Stage::Rank]).unwrap_err();
        assert!(matches!(err, PipelineError::Dependency { stage: Stage::Rank, needs: Stage::Generate, .. }));
        assert_eq!(err.exit_code(), 2);
        pipeline.run(&[Stage::Ingest]).unwrap();
        assert!(matches!(pipeline.run(&[Stage::Augment]), Err(PipelineError::Dependency { needs: Stage::Bank, .. })));
    }

    #[test]
    fn unapproved_bank_fails_augment_with_manifest_written() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(config(dir.path(), r#", "bank": {"size": 4, "auto_approve": false}"#)).unwrap();
        let err = pipeline.run(&[Stage::Ingest, Stage::Bank, Stage::Augment]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("augment"), "{err}");
        let products = pipeline.ingested_products();
        let m = pipeline.manifest(&products[0]).unwrap();
        assert!(m.has_stage("bank"));
    }

    #[test]
    fn sweep_trains_each_candidate() {
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::new(config(dir.path(), r#", "finetune": {"sweep_size": 3, "rare_tokens": ["qvx", "zxq", "ohwx", "pll"]}"#)).unwrap();
        let summary = pipeline.run(&Stage::ALL[..6]).unwrap();
        let m = pipeline.manifest(&summary.products[0]).unwrap();
        let train = m.last_stage("train").unwrap();
        let scores = train.config_snapshot["sweep"]["scores"].as_array().unwrap();
        assert_eq!(scores.len(), 3);
        let best = train.config_snapshot["token"].as_str().unwrap();
        let best_score = scores.iter().find(|s| s["token"] == best).unwrap()["score"].as_f64().unwrap();
        assert!(scores.iter().all(|s| s["score"].as_f64().unwrap_or(f64::NEG_INFINITY) <= best_score));
        assert!(spec_path(&pipeline.run_dir(), &summary.products[0], best).is_file());
    }
}
