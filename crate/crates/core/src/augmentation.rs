//! Synthetic training images: novel views, new-context outpaints, negatives
//! and counterfactuals, plus fine-grained captions for all of them.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::backend::{BackendError, Backends};
use crate::canonical::{derive_id, derive_seed};
use crate::manifest::FilteredItem;
use crate::model::{AssetRole, CaptionRecord, ImageAsset, ProductRecord, Provenance};
use crate::parallel::bounded_map;
use crate::prompt_bank::{BankError, PromptBank};
use crate::raster::{Mask, Raster};
use crate::store::{AssetStore, StoreError};

pub const DEFAULT_CAPTION_TEMPLATE: &str = "Describe this image of {product_title} in fine-grained detail, including color, position, lighting, and any distinguishing product details.";

pub const TITLE_PLACEHOLDER: &str = "{product_title}";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("degenerate mask: segmentation of {0} found no foreground")]
    DegenerateMask(String),
    #[error("asset {0} has no caption")]
    MissingCaption(String),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type AugmentResult<T> = Result<T, AugmentError>;

/// Assets produced by one operation, and inputs skipped along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Produced {
    pub assets: Vec<ImageAsset>,
    pub skipped: Vec<FilteredItem>,
}

impl Produced {
    fn absorb(&mut self, source_id: &str, result: AugmentResult<Vec<ImageAsset>>) -> AugmentResult<()> {
        match result {
            Ok(assets) => self.assets.extend(assets),
            Err(e @ (AugmentError::Bank(_) | AugmentError::Store(_) | AugmentError::Precondition(_))) => return Err(e),
            Err(e) => self.skipped.push(FilteredItem::new(source_id, e.to_string(), None)),
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.assets.iter().map(|a| a.asset_id.clone()).collect()
    }
}

/// Frame indices kept from an `n_frames` clip: `k` evenly spaced over `1..n_frames`,
/// always ending on the last frame. Frame 0 is the input and never kept.
pub fn kept_frame_indices(n_frames: usize, frames_to_keep: usize) -> AugmentResult<Vec<usize>> {
    if frames_to_keep == 0 || frames_to_keep >= n_frames {
        return Err(AugmentError::Precondition(format!(
            "frames_to_keep must be in 1..={} for {n_frames} frames, got {frames_to_keep}",
            n_frames.saturating_sub(1)
        )));
    }
    Ok((1..=frames_to_keep).map(|j| j * (n_frames - 1) / frames_to_keep).collect())
}

/// Positives first by role priority (base, novel view, new context), then by id.
fn positive_key(a: &ImageAsset) -> (u8, &str) {
    (a.role.positive_priority().unwrap_or(u8::MAX), a.asset_id.as_str())
}

/// Keeps every positive and the first `floor(|pos| * rn / rp)` negatives by id.
/// Positives come back in priority order.
pub fn enforce_ratio(
    positives: &[ImageAsset],
    negatives: &[ImageAsset],
    ratio_pos: u32,
    ratio_neg: u32,
) -> (Vec<ImageAsset>, Vec<ImageAsset>) {
    let (rp, rn) = (ratio_pos.max(1) as usize, ratio_neg.max(1) as usize);
    let mut pos = positives.to_vec();
    pos.sort_by(|a, b| positive_key(a).cmp(&positive_key(b)));
    let mut neg = negatives.to_vec();
    neg.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
    neg.truncate(pos.len() * rn / rp);
    (pos, neg)
}

/// Runs augmentation calls for one product within one pipeline run.
pub struct Augmenter<'a> {
    pub store: &'a AssetStore,
    pub backends: &'a Backends,
    pub run_id: &'a str,
    pub concurrency: usize,
}

impl<'a> Augmenter<'a> {
    pub fn new(store: &'a AssetStore, backends: &'a Backends, run_id: &'a str) -> Self {
        Self { store, backends, run_id, concurrency: 4 }
    }

    pub fn with_concurrency(mut self, bound: usize) -> Self {
        self.concurrency = bound.max(1);
        self
    }

    fn segment_nonempty(&self, asset_id: &str, raster: &Raster, hint: &str) -> AugmentResult<Mask> {
        let mask = self.backends.segmenter.segment(raster, hint)?;
        if mask.is_empty() {
            return Err(AugmentError::DegenerateMask(asset_id.to_string()));
        }
        Ok(mask)
    }

    /// Mask stored on the asset, or a fresh segmentation that is then stored and linked.
    fn mask_for(&self, asset: &ImageAsset, raster: &Raster, hint: &str) -> AugmentResult<(Mask, String)> {
        if let Some(r) = &asset.mask_ref {
            let mask = self.store.load_mask(r)?;
            if mask.is_empty() {
                return Err(AugmentError::DegenerateMask(asset.asset_id.clone()));
            }
            return Ok((mask, r.clone()));
        }
        let mask = self.segment_nonempty(&asset.asset_id, raster, hint)?;
        let mask_ref = self.store.store_mask(&asset.product_id, asset.role, &asset.asset_id, &mask)?;
        self.store.link_mask(&asset.asset_id, &mask_ref)?;
        Ok((mask, mask_ref))
    }

    /// Keeps `frames_to_keep` frames per base image; each kept frame is re-segmented.
    pub fn harvest_novel_views(
        &self,
        product: &ProductRecord,
        n_frames: usize,
        frames_to_keep: usize,
        seed: u64,
    ) -> AugmentResult<Produced> {
        if product.base_asset_ids.is_empty() {
            return Err(AugmentError::Precondition(format!("product {} has no base images", product.product_id)));
        }
        let keep = kept_frame_indices(n_frames, frames_to_keep)?;
        let results = bounded_map(&product.base_asset_ids, self.concurrency, |base_id| {
            self.novel_views_of(product, base_id, n_frames, &keep, seed)
        });
        let mut out = Produced::default();
        for (base_id, r) in product.base_asset_ids.iter().zip(results) {
            out.absorb(base_id, r)?;
        }
        Ok(out)
    }

    fn novel_views_of(
        &self,
        product: &ProductRecord,
        base_id: &str,
        n_frames: usize,
        keep: &[usize],
        seed: u64,
    ) -> AugmentResult<Vec<ImageAsset>> {
        let raster = self.store.load_raster(base_id)?;
        let s = derive_seed(seed, base_id);
        let frames = self.backends.views.generate_novel_views(&raster, s, n_frames)?;
        let mut out = Vec::with_capacity(keep.len());
        for &i in keep {
            let frame = &frames[i];
            let id = derive_id("nv", self.run_id, &product.product_id, &format!("novel_views/{base_id}"), seed, i);
            let mut asset = ImageAsset::new(&id, &product.product_id, AssetRole::NovelView, frame.width(), frame.height())
                .with_provenance(
                    Provenance::new(self.backends.views.name(), s)
                        .with_param("source_asset_id", base_id)
                        .with_param("frame_index", i.to_string())
                        .with_param("n_frames", n_frames.to_string()),
                );
            let mask = self.backends.segmenter.segment(frame, &product.category)?;
            if !mask.is_empty() {
                asset.mask_ref = Some(self.store.store_mask(&product.product_id, AssetRole::NovelView, &id, &mask)?);
            }
            self.store.put_asset(&asset, frame)?;
            out.push(self.store.load_asset(&id)?);
        }
        Ok(out)
    }

    /// Segments `source`, draws `k_prompts` prompts and outpaints once per prompt.
    /// Outputs carry the preserved mask as `mask_ref`.
    pub fn generate_new_context(
        &self,
        source_id: &str,
        category: &str,
        bank: &PromptBank,
        k_prompts: usize,
        seed: u64,
    ) -> AugmentResult<Vec<ImageAsset>> {
        let source = self.store.load_asset(source_id)?;
        if !matches!(source.role, AssetRole::Base | AssetRole::NovelView) {
            return Err(AugmentError::Precondition(format!("{source_id} is a {} asset", source.role)));
        }
        let raster = self.store.load_raster(source_id)?;
        let (mask, mask_ref) = self.mask_for(&source, &raster, category)?;
        let prompts = bank.get_prompts(category, k_prompts, derive_seed(seed, source_id))?;
        let mut out = Vec::with_capacity(prompts.len());
        for (i, prompt) in prompts.iter().enumerate() {
            let s = derive_seed(seed, &format!("{source_id}/{i}"));
            let image = self.backends.images.outpaint(&raster, &mask, prompt, s)?;
            let id = derive_id("ctx", self.run_id, &source.product_id, &format!("new_context/{source_id}"), seed, i);
            let mut asset = ImageAsset::new(&id, &source.product_id, AssetRole::NewContext, image.width(), image.height())
                .with_prompt(prompt.as_str())
                .with_provenance(
                    Provenance::new(self.backends.images.name(), s)
                        .with_param("operation", "outpaint")
                        .with_param("source_asset_id", source_id),
                );
            asset.mask_ref = Some(mask_ref.clone());
            self.store.put_asset(&asset, &image)?;
            out.push(self.store.load_asset(&id)?);
        }
        Ok(out)
    }

    /// [`generate_new_context`](Self::generate_new_context) over many sources; degenerate masks skip a source.
    pub fn new_context_batch(
        &self,
        source_ids: &[String],
        category: &str,
        bank: &PromptBank,
        k_prompts: usize,
        seed: u64,
    ) -> AugmentResult<Produced> {
        let results = bounded_map(source_ids, self.concurrency, |id| {
            self.generate_new_context(id, category, bank, k_prompts, seed)
        });
        let mut out = Produced::default();
        for (id, r) in source_ids.iter().zip(results) {
            out.absorb(id, r)?;
        }
        Ok(out)
    }

    /// One caption per asset, stored and linked. Backend failures skip the asset.
    pub fn caption_assets(
        &self,
        asset_ids: &[String],
        instruction_template: &str,
        product: &ProductRecord,
    ) -> AugmentResult<(Vec<CaptionRecord>, Vec<FilteredItem>)> {
        if !instruction_template.contains(TITLE_PLACEHOLDER) {
            return Err(AugmentError::Precondition(format!("caption template lacks {TITLE_PLACEHOLDER}")));
        }
        let instruction = instruction_template.replace(TITLE_PLACEHOLDER, &product.title);
        let results = bounded_map(asset_ids, self.concurrency, |id| -> AugmentResult<CaptionRecord> {
            let raster = self.store.load_raster(id)?;
            let caption = self.backends.captioner.caption(&raster, &instruction)?;
            let record = CaptionRecord {
                caption_id: derive_id("cap", self.run_id, &product.product_id, id, 0, 0),
                asset_id: id.clone(),
                text: caption.text,
                attributes: caption.attributes,
            };
            self.store.put_caption(&product.product_id, &record)?;
            self.store.link_caption(id, &record.caption_id)?;
            Ok(record)
        });
        let mut records = Vec::new();
        let mut skipped = Vec::new();
        for (id, r) in asset_ids.iter().zip(results) {
            match r {
                Ok(rec) => records.push(rec),
                Err(AugmentError::Backend(e)) => skipped.push(FilteredItem::new(id, e.to_string(), None)),
                Err(e) => return Err(e),
            }
        }
        Ok((records, skipped))
    }

    /// Regenerates the first `count` positives (by id) from their captions with
    /// the base model. Every positive must already be captioned.
    pub fn generate_negatives(
        &self,
        product: &ProductRecord,
        positives: &[String],
        count: usize,
        seed: u64,
    ) -> AugmentResult<Produced> {
        let mut sorted = positives.to_vec();
        sorted.sort();
        let mut captions = BTreeMap::new();
        for id in &sorted {
            let caption = self.store.caption_for(id)?.ok_or_else(|| AugmentError::MissingCaption(id.clone()))?;
            captions.insert(id.clone(), caption.text);
        }
        sorted.truncate(count);
        let results = bounded_map(&sorted, self.concurrency, |id| -> AugmentResult<Vec<ImageAsset>> {
            let text = &captions[id];
            let s = derive_seed(seed, id);
            let image = self.backends.images.generate_image(text, s)?;
            let neg_id = derive_id("neg", self.run_id, &product.product_id, &format!("negatives/{id}"), seed, 0);
            let asset = ImageAsset::new(&neg_id, &product.product_id, AssetRole::Negative, image.width(), image.height())
                .with_prompt(text.as_str())
                .with_provenance(
                    Provenance::new(self.backends.images.name(), s)
                        .with_param("operation", "generate")
                        .with_param("source_asset_id", id.as_str()),
                );
            self.store.put_asset(&asset, &image)?;
            Ok(vec![self.store.load_asset(&neg_id)?])
        });
        let mut out = Produced::default();
        for (id, r) in sorted.iter().zip(results) {
            out.absorb(id, r)?;
        }
        Ok(out)
    }

    /// Inpaints one distractor object per prompt over the product's mask.
    pub fn generate_counterfactuals(
        &self,
        source_id: &str,
        distractor_prompts: &[String],
        seed: u64,
    ) -> AugmentResult<Vec<ImageAsset>> {
        if distractor_prompts.is_empty() {
            return Err(AugmentError::Precondition("no distractor prompts".into()));
        }
        let source = self.store.load_asset(source_id)?;
        let raster = self.store.load_raster(source_id)?;
        let (mask, mask_ref) = self.mask_for(&source, &raster, "product")?;
        let mut out = Vec::with_capacity(distractor_prompts.len());
        for (i, prompt) in distractor_prompts.iter().enumerate() {
            let s = derive_seed(seed, &format!("{source_id}/{i}"));
            let image = self.backends.images.inpaint(&raster, &mask, prompt, s)?;
            let id = derive_id("cf", self.run_id, &source.product_id, &format!("counterfactuals/{source_id}"), seed, i);
            let asset = ImageAsset::new(&id, &source.product_id, AssetRole::Counterfactual, image.width(), image.height())
                .with_prompt(prompt.as_str())
                .with_provenance(
                    Provenance::new(self.backends.images.name(), s)
                        .with_param("operation", "inpaint")
                        .with_param("source_asset_id", source_id)
                        .with_param("inpainted_mask_ref", mask_ref.as_str()),
                );
            self.store.put_asset(&asset, &image)?;
            out.push(self.store.load_asset(&id)?);
        }
        Ok(out)
    }

    /// `count` counterfactuals cycling over `sources` (by id) and over
    /// `distractor_categories` round-robin; each draws one prompt from that category's bank.
    pub fn counterfactual_batch(
        &self,
        sources: &[String],
        distractor_categories: &[String],
        bank: &PromptBank,
        count: usize,
        seed: u64,
    ) -> AugmentResult<Produced> {
        let mut out = Produced::default();
        if count == 0 {
            return Ok(out);
        }
        if sources.is_empty() || distractor_categories.is_empty() {
            return Err(AugmentError::Precondition("counterfactuals need sources and distractor categories".into()));
        }
        let mut sorted = sources.to_vec();
        sorted.sort();
        let jobs: Vec<(String, String, u64)> = (0..count)
            .map(|i| {
                let s = derive_seed(seed, &format!("counterfactual/{i}"));
                (sorted[i % sorted.len()].clone(), distractor_categories[i % distractor_categories.len()].clone(), s)
            })
            .collect();
        let mut prompts = Vec::with_capacity(jobs.len());
        for (_, category, s) in &jobs {
            prompts.push(bank.get_prompts(category, 1, *s)?.remove(0));
        }
        let results = bounded_map(&jobs.iter().zip(&prompts).collect::<Vec<_>>(), self.concurrency, |((src, _, s), p)| {
            self.generate_counterfactuals(src, std::slice::from_ref(*p), *s)
        });
        for ((src, _, _), r) in jobs.iter().zip(results) {
            out.absorb(src, r)?;
        }
        Ok(out)
    }
}
