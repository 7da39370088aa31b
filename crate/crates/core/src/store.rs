//! On-disk asset store.
//!
//! Layout under the store root:
//!
//! ```text
//! <product_id>/product.meta
//! <product_id>/<role>/<asset_id>.png
//! <product_id>/<role>/<asset_id>.meta
//! <product_id>/<role>/<asset_id>.mask.png
//! <product_id>/captions/<caption_id>.meta
//! <product_id>/runs/<run_id>.manifest
//! ```
//!
//! Sidecars use the canonical serialization. Reads are concurrent; writes for
//! one product are serialized by a per-product lock.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::manifest::{ManifestError, PipelineManifest};
use crate::model::{AssetRole, CaptionRecord, ImageAsset, ProductRecord, ValidationError};
use crate::raster::{Mask, Raster, RasterError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("asset {asset_id} declares {declared:?} but pixels are {actual:?}")]
    DimensionMismatch { asset_id: String, declared: (u32, u32), actual: (u32, u32) },
    #[error("{kind} {id} already exists")]
    Conflict { kind: &'static str, id: String },
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("unsafe path component {0:?}")]
    BadPathComponent(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn safe_component(s: &str) -> Result<&str, StoreError> {
    if s.is_empty() || s == "." || s == ".." || s.contains(['/', '\\', '\0']) {
        return Err(StoreError::BadPathComponent(s.to_string()));
    }
    Ok(s)
}

/// Writes via a temp file and rename so readers never see partial files.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone)]
struct AssetLocation {
    product_id: String,
    role: AssetRole,
}

/// An asset together with its pixels and (optional) mask.
#[derive(Debug, Clone)]
pub struct LoadedAsset {
    pub asset: ImageAsset,
    pub raster: Raster,
    pub mask: Option<Mask>,
}

#[derive(Debug)]
pub struct AssetStore {
    root: PathBuf,
    assets: RwLock<HashMap<String, AssetLocation>>,
    captions: RwLock<HashMap<String, String>>,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AssetStore {
    /// Opens (creating if needed) a store rooted at `root` and indexes its contents.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let store = Self {
            root,
            assets: RwLock::new(HashMap::new()),
            captions: RwLock::new(HashMap::new()),
            writers: Mutex::new(HashMap::new()),
        };
        store.reindex()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn reindex(&self) -> Result<(), StoreError> {
        let mut assets = HashMap::new();
        let mut captions = HashMap::new();
        for product_dir in read_dir_sorted(&self.root)? {
            if !product_dir.is_dir() {
                continue;
            }
            let product_id = file_name(&product_dir);
            for role in AssetRole::ALL {
                for meta in read_dir_sorted(&product_dir.join(role.as_str()))? {
                    if meta.extension().is_some_and(|e| e == "meta") {
                        let id = file_stem(&meta);
                        assets.insert(id, AssetLocation { product_id: product_id.clone(), role });
                    }
                }
            }
            for meta in read_dir_sorted(&product_dir.join("captions"))? {
                if meta.extension().is_some_and(|e| e == "meta") {
                    captions.insert(file_stem(&meta), product_id.clone());
                }
            }
        }
        // Merge rather than replace so concurrent inserts survive a rescan.
        self.assets.write().expect("index lock").extend(assets);
        self.captions.write().expect("index lock").extend(captions);
        Ok(())
    }

    fn writer_lock(&self, product_id: &str) -> Arc<Mutex<()>> {
        self.writers
            .lock()
            .expect("writer table lock")
            .entry(product_id.to_string())
            .or_default()
            .clone()
    }

    fn product_dir(&self, product_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.root.join(safe_component(product_id)?))
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    pub fn resolve(&self, store_ref: &str) -> PathBuf {
        self.root.join(store_ref)
    }

    /// Persists pixels and sidecar metadata; returns the asset id.
    pub fn store_asset(&self, asset: &ImageAsset, pixels: &Raster) -> Result<String, StoreError> {
        asset.validate()?;
        if pixels.dimensions() != (asset.width, asset.height) {
            return Err(StoreError::DimensionMismatch {
                asset_id: asset.asset_id.clone(),
                declared: (asset.width, asset.height),
                actual: pixels.dimensions(),
            });
        }
        let id = safe_component(&asset.asset_id)?.to_string();
        let lock = self.writer_lock(&asset.product_id);
        let _guard = lock.lock().expect("product writer lock");
        if self.assets.read().expect("index lock").contains_key(&id) {
            return Err(StoreError::Conflict { kind: "asset", id });
        }
        let dir = self.product_dir(&asset.product_id)?.join(asset.role.as_str());
        let png_path = dir.join(format!("{id}.png"));
        let mut stored = asset.clone();
        stored.image_ref = self.relative(&png_path);
        write_atomic(&png_path, &pixels.to_png()?)?;
        write_atomic(&dir.join(format!("{id}.meta")), to_canonical_string(&stored)?.as_bytes())?;
        self.assets
            .write()
            .expect("index lock")
            .insert(id.clone(), AssetLocation { product_id: asset.product_id.clone(), role: asset.role });
        Ok(id)
    }

    /// Like [`store_asset`](Self::store_asset), but re-storing identical pixels under an
    /// existing id succeeds. Lets an interrupted run be replayed in place.
    pub fn put_asset(&self, asset: &ImageAsset, pixels: &Raster) -> Result<String, StoreError> {
        match self.store_asset(asset, pixels) {
            Err(StoreError::Conflict { .. }) if self.load_raster(&asset.asset_id)? == *pixels => Ok(asset.asset_id.clone()),
            other => other,
        }
    }

    /// Stores a mask next to its owning asset; returns the store-relative ref.
    pub fn store_mask(&self, product_id: &str, role: AssetRole, owner_id: &str, mask: &Mask) -> Result<String, StoreError> {
        let path = self
            .product_dir(product_id)?
            .join(role.as_str())
            .join(format!("{}.mask.png", safe_component(owner_id)?));
        let lock = self.writer_lock(product_id);
        let _guard = lock.lock().expect("product writer lock");
        write_atomic(&path, &mask.to_png()?)?;
        Ok(self.relative(&path))
    }

    /// Rescans the root once on a miss, so handles opened before another
    /// writer added an asset still find it.
    fn location(&self, asset_id: &str) -> Result<AssetLocation, StoreError> {
        let lookup = || self.assets.read().expect("index lock").get(asset_id).cloned();
        lookup()
            .or_else(|| self.reindex().ok().and_then(|_| lookup()))
            .ok_or_else(|| StoreError::NotFound { kind: "asset", id: asset_id.to_string() })
    }

    fn meta_path(&self, asset_id: &str) -> Result<PathBuf, StoreError> {
        let loc = self.location(asset_id)?;
        Ok(self.product_dir(&loc.product_id)?.join(loc.role.as_str()).join(format!("{asset_id}.meta")))
    }

    pub fn contains(&self, asset_id: &str) -> bool {
        self.assets.read().expect("index lock").contains_key(asset_id)
    }

    pub fn load_asset(&self, asset_id: &str) -> Result<ImageAsset, StoreError> {
        let path = self.meta_path(asset_id)?;
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_raster(&self, asset_id: &str) -> Result<Raster, StoreError> {
        let asset = self.load_asset(asset_id)?;
        let path = self.resolve(&asset.image_ref);
        Ok(Raster::from_png(&fs::read(&path).map_err(io_err(&path))?)?)
    }

    pub fn load_mask(&self, mask_ref: &str) -> Result<Mask, StoreError> {
        let path = self.resolve(mask_ref);
        Ok(Mask::from_png(&fs::read(&path).map_err(io_err(&path))?)?)
    }

    pub fn load(&self, asset_id: &str) -> Result<LoadedAsset, StoreError> {
        let asset = self.load_asset(asset_id)?;
        let path = self.resolve(&asset.image_ref);
        let raster = Raster::from_png(&fs::read(&path).map_err(io_err(&path))?)?;
        let mask = asset.mask_ref.as_deref().map(|r| self.load_mask(r)).transpose()?;
        Ok(LoadedAsset { asset, raster, mask })
    }

    /// Raw PNG bytes of an asset, as stored.
    pub fn raster_png(&self, asset_id: &str) -> Result<Vec<u8>, StoreError> {
        let asset = self.load_asset(asset_id)?;
        let path = self.resolve(&asset.image_ref);
        fs::read(&path).map_err(io_err(&path))
    }

    fn update_meta(&self, asset_id: &str, edit: impl FnOnce(&mut ImageAsset)) -> Result<ImageAsset, StoreError> {
        let loc = self.location(asset_id)?;
        let lock = self.writer_lock(&loc.product_id);
        let _guard = lock.lock().expect("product writer lock");
        let mut asset = self.load_asset(asset_id)?;
        edit(&mut asset);
        asset.validate()?;
        write_atomic(&self.meta_path(asset_id)?, to_canonical_string(&asset)?.as_bytes())?;
        Ok(asset)
    }

    pub fn link_caption(&self, asset_id: &str, caption_id: &str) -> Result<ImageAsset, StoreError> {
        self.update_meta(asset_id, |a| a.caption_id = Some(caption_id.to_string()))
    }

    pub fn link_mask(&self, asset_id: &str, mask_ref: &str) -> Result<ImageAsset, StoreError> {
        self.update_meta(asset_id, |a| a.mask_ref = Some(mask_ref.to_string()))
    }

    /// Asset ids of `product_id`, optionally restricted to one role, sorted.
    pub fn asset_ids(&self, product_id: &str, role: Option<AssetRole>) -> Vec<String> {
        let mut ids: Vec<String> = self
            .assets
            .read()
            .expect("index lock")
            .iter()
            .filter(|(_, loc)| loc.product_id == product_id && role.is_none_or(|r| r == loc.role))
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    }

    pub fn store_caption(&self, product_id: &str, caption: &CaptionRecord) -> Result<(), StoreError> {
        caption.validate()?;
        let path = self
            .product_dir(product_id)?
            .join("captions")
            .join(format!("{}.meta", safe_component(&caption.caption_id)?));
        let lock = self.writer_lock(product_id);
        let _guard = lock.lock().expect("product writer lock");
        if self.captions.read().expect("index lock").contains_key(&caption.caption_id) {
            return Err(StoreError::Conflict { kind: "caption", id: caption.caption_id.clone() });
        }
        write_atomic(&path, to_canonical_string(caption)?.as_bytes())?;
        self.captions
            .write()
            .expect("index lock")
            .insert(caption.caption_id.clone(), product_id.to_string());
        Ok(())
    }

    /// Like [`store_caption`](Self::store_caption), but an identical existing record is not a conflict.
    pub fn put_caption(&self, product_id: &str, caption: &CaptionRecord) -> Result<(), StoreError> {
        match self.store_caption(product_id, caption) {
            Err(StoreError::Conflict { .. }) if self.load_caption(&caption.caption_id)? == *caption => Ok(()),
            other => other,
        }
    }

    pub fn load_caption(&self, caption_id: &str) -> Result<CaptionRecord, StoreError> {
        let product_id = self
            .captions
            .read()
            .expect("index lock")
            .get(caption_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound { kind: "caption", id: caption_id.to_string() })?;
        let path = self.product_dir(&product_id)?.join("captions").join(format!("{caption_id}.meta"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Caption linked to `asset_id`, if any.
    pub fn caption_for(&self, asset_id: &str) -> Result<Option<CaptionRecord>, StoreError> {
        match self.load_asset(asset_id)?.caption_id {
            Some(id) => Ok(Some(self.load_caption(&id)?)),
            None => Ok(None),
        }
    }

    pub fn store_product(&self, product: &ProductRecord) -> Result<(), StoreError> {
        product.validate()?;
        let path = self.product_dir(&product.product_id)?.join("product.meta");
        let lock = self.writer_lock(&product.product_id);
        let _guard = lock.lock().expect("product writer lock");
        write_atomic(&path, to_canonical_string(product)?.as_bytes())
    }

    pub fn load_product(&self, product_id: &str) -> Result<ProductRecord, StoreError> {
        let path = self.product_dir(product_id)?.join("product.meta");
        if !path.exists() {
            return Err(StoreError::NotFound { kind: "product", id: product_id.to_string() });
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Ids of every stored product, sorted.
    pub fn product_ids(&self) -> Result<Vec<String>, StoreError> {
        Ok(read_dir_sorted(&self.root)?
            .into_iter()
            .filter(|d| d.join("product.meta").is_file())
            .map(|d| file_name(&d))
            .collect())
    }

    fn manifest_path(&self, product_id: &str, run_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self
            .product_dir(product_id)?
            .join("runs")
            .join(format!("{}.manifest", safe_component(run_id)?)))
    }

    /// Persists `manifest`, refusing to rewrite any previously persisted record.
    pub fn save_manifest(&self, manifest: &PipelineManifest) -> Result<(), StoreError> {
        let lock = self.writer_lock(manifest.product_id());
        let _guard = lock.lock().expect("product writer lock");
        if let Some(existing) = self.load_manifest(manifest.product_id(), manifest.run_id())? {
            manifest.ensure_extends(&existing)?;
        }
        let path = self.manifest_path(manifest.product_id(), manifest.run_id())?;
        write_atomic(&path, manifest.to_text()?.as_bytes())
    }

    pub fn load_manifest(&self, product_id: &str, run_id: &str) -> Result<Option<PipelineManifest>, StoreError> {
        let path = self.manifest_path(product_id, run_id)?;
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(Some(PipelineManifest::from_text(&text)?))
    }

    /// Ids referenced by `manifest` that are absent from the store.
    pub fn missing_references(&self, manifest: &PipelineManifest) -> Vec<String> {
        let index = self.assets.read().expect("index lock");
        let mut missing: Vec<String> = manifest
            .records()
            .iter()
            .flat_map(|r| r.inputs.iter().chain(&r.outputs).chain(r.filtered.iter().map(|f| &f.asset_id)))
            .filter(|id| !index.contains_key(id.as_str()))
            .cloned()
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
