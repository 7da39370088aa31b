//! Deterministic mock backends. Every output is a pure function of the request
//! payload and seed, so whole pipeline runs replay bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    BackendError, BackendResult, Backends, Caption, Captioner, Embedder, EmbeddingModel, EmbeddingVector,
    ImageGenerator, JobRef, JobStatus, NovelViewGenerator, ReferencePixels, Sampler, Segmenter, TextGenerator,
    Trainer,
};
use crate::canonical::{derive_seed, digest_of};
use crate::model::TrainingDatasetSpec;
use crate::raster::{Mask, Raster};

/// Instruction the category classifier sends to the captioner.
pub const CLASSIFY_INSTRUCTION: &str = "Name the type of product shown in this image using one or two lowercase words.";

const MOCK_CATEGORIES: [&str; 6] = ["chair", "table", "lamp", "sofa", "desk", "shelf"];

fn rng_for(parts: &[&[u8]], seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.update(seed.to_le_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(key)
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

/// Procedural background texture keyed by `(prompt, seed)`: a base color,
/// a linear gradient and a triangle-wave stripe pattern. Integer-only, so the
/// output is identical on every platform.
pub fn mock_texture(prompt: &str, seed: u64, width: u32, height: u32) -> Raster {
    let mut rng = rng_for(&[b"texture", prompt.as_bytes()], seed);
    let base: [i32; 3] = std::array::from_fn(|_| rng.gen_range(40..=215));
    let gx: [i32; 3] = std::array::from_fn(|_| rng.gen_range(-3..=3));
    let gy: [i32; 3] = std::array::from_fn(|_| rng.gen_range(-3..=3));
    let amp: i32 = rng.gen_range(0..=30);
    let period: i32 = rng.gen_range(6..=24);
    let kx: i32 = rng.gen_range(0..=3);
    let ky: i32 = rng.gen_range(0..=3);
    Raster::from_fn(width, height, |x, y| {
        let (x, y) = (x as i32, y as i32);
        let t = (kx * x + ky * y).rem_euclid(period);
        let stripe = amp * (2 * t - period).abs() / period - amp / 2;
        std::array::from_fn(|c| clamp_u8(base[c] + gx[c] * x / 10 + gy[c] * y / 10 + stripe))
    })
}

fn l1(a: [u8; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] as f64 - b[c]).abs()).sum()
}

fn border_mean(image: &Raster) -> [f64; 3] {
    let (w, h) = image.dimensions();
    let mut sum = [0f64; 3];
    let mut n = 0f64;
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                let p = image.pixel(x, y);
                for c in 0..3 {
                    sum[c] += p[c] as f64;
                }
                n += 1.0;
            }
        }
    }
    sum.map(|s| s / n)
}

/// Color-threshold segmentation: pixels whose L1 distance from the mean
/// border color exceeds `threshold` are foreground.
pub fn threshold_segment(image: &Raster, threshold: f64) -> Mask {
    let bg = border_mean(image);
    Mask::from_fn(image.width(), image.height(), |x, y| l1(image.pixel(x, y), bg) > threshold)
}

pub const DEFAULT_SEGMENT_THRESHOLD: f64 = 60.0;

const NAMED_COLORS: [(&str, [u8; 3]); 13] = [
    ("red", [200, 40, 40]),
    ("orange", [230, 130, 30]),
    ("yellow", [220, 210, 50]),
    ("green", [50, 160, 60]),
    ("teal", [40, 150, 150]),
    ("blue", [50, 80, 200]),
    ("purple", [130, 60, 170]),
    ("pink", [230, 140, 180]),
    ("brown", [120, 80, 40]),
    ("black", [20, 20, 20]),
    ("gray", [128, 128, 128]),
    ("white", [235, 235, 235]),
    ("beige", [215, 200, 160]),
];

pub fn nearest_color_name(rgb: [f64; 3]) -> &'static str {
    NAMED_COLORS
        .iter()
        .min_by(|a, b| {
            let da: f64 = (0..3).map(|c| (a.1[c] as f64 - rgb[c]).powi(2)).sum();
            let db: f64 = (0..3).map(|c| (b.1[c] as f64 - rgb[c]).powi(2)).sum();
            da.total_cmp(&db)
        })
        .map(|(name, _)| *name)
        .expect("palette is non-empty")
}

fn mean_color(image: &Raster, include: impl Fn(u32, u32) -> bool) -> Option<[f64; 3]> {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if include(x, y) {
                let p = image.pixel(x, y);
                for c in 0..3 {
                    sum[c] += p[c] as f64;
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

#[derive(Debug, Clone)]
pub struct MockImageGenerator {
    pub width: u32,
    pub height: u32,
}

impl Default for MockImageGenerator {
    fn default() -> Self {
        Self { width: 64, height: 64 }
    }
}

impl ImageGenerator for MockImageGenerator {
    fn name(&self) -> &str {
        "mock-diffusion"
    }

    fn generate_raw(&self, prompt: &str, seed: u64) -> BackendResult<Raster> {
        Ok(mock_texture(prompt, seed, self.width, self.height))
    }

    fn outpaint_raw(&self, image: &Raster, _mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster> {
        Ok(mock_texture(prompt, seed, image.width(), image.height()))
    }

    fn inpaint_raw(&self, image: &Raster, _mask: &Mask, prompt: &str, seed: u64) -> BackendResult<Raster> {
        Ok(mock_texture(prompt, seed, image.width(), image.height()))
    }
}

/// Frames pan the input sideways and shift its global tint, one step per frame.
#[derive(Debug, Clone, Default)]
pub struct MockNovelViews;

impl NovelViewGenerator for MockNovelViews {
    fn name(&self) -> &str {
        "mock-video"
    }

    fn novel_views_raw(&self, image: &Raster, seed: u64, n_frames: usize) -> BackendResult<Vec<Raster>> {
        let mut rng = rng_for(&[b"views", image.digest().as_bytes()], seed);
        let step: i32 = rng.gen_range(1..=3) * if rng.gen_bool(0.5) { 1 } else { -1 };
        let (w, h) = image.dimensions();
        let mut frames = Vec::with_capacity(n_frames);
        frames.push(image.clone());
        for i in 1..n_frames as i32 {
            let tint: [i32; 3] = std::array::from_fn(|_| rng.gen_range(-24..=24));
            let dx = step * i;
            frames.push(Raster::from_fn(w, h, |x, y| {
                let sx = (x as i32 - dx).clamp(0, w as i32 - 1) as u32;
                let p = image.pixel(sx, y);
                std::array::from_fn(|c| clamp_u8(p[c] as i32 + tint[c]))
            }));
        }
        Ok(frames)
    }
}

#[derive(Debug, Clone)]
pub struct MockSegmenter {
    pub threshold: f64,
}

impl Default for MockSegmenter {
    fn default() -> Self {
        Self { threshold: DEFAULT_SEGMENT_THRESHOLD }
    }
}

impl Segmenter for MockSegmenter {
    fn name(&self) -> &str {
        "mock-segmenter"
    }

    fn segment_raw(&self, image: &Raster, _subject_hint: &str) -> BackendResult<Mask> {
        Ok(threshold_segment(image, self.threshold))
    }
}

/// Describes the foreground's dominant color, position and brightness, tagged
/// with a digest fragment so distinct images never share a caption.
#[derive(Debug, Clone, Default)]
pub struct MockCaptioner;

impl Captioner for MockCaptioner {
    fn name(&self) -> &str {
        "mock-vlm"
    }

    fn caption_raw(&self, image: &Raster, instruction: &str) -> BackendResult<Caption> {
        let digest = image.digest();
        if instruction == CLASSIFY_INSTRUCTION {
            let idx = u8::from_str_radix(&digest[..2], 16).unwrap_or(0) as usize % MOCK_CATEGORIES.len();
            return Ok(Caption { text: MOCK_CATEGORIES[idx].to_string(), attributes: BTreeMap::new() });
        }
        let mask = threshold_segment(image, DEFAULT_SEGMENT_THRESHOLD);
        let use_all = mask.is_empty();
        let include = |x, y| use_all || mask.get(x, y);
        let color = nearest_color_name(mean_color(image, include).expect("image is non-empty"));
        let (mut cx, mut cy, mut n) = (0f64, 0f64, 0f64);
        for y in 0..image.height() {
            for x in 0..image.width() {
                if include(x, y) {
                    cx += x as f64;
                    cy += y as f64;
                    n += 1.0;
                }
            }
        }
        let (fx, fy) = (cx / n / image.width() as f64, cy / n / image.height() as f64);
        let horiz = if fx < 0.4 { "left" } else if fx > 0.6 { "right" } else { "center" };
        let vert = if fy < 0.4 { "top" } else if fy > 0.6 { "bottom" } else { "middle" };
        let position = if vert == "middle" && horiz == "center" { "center".to_string() } else { format!("{vert} {horiz}") };
        let luma = (0..image.height())
            .flat_map(|y| (0..image.width()).map(move |x| (x, y)))
            .map(|(x, y)| image.gray(x, y))
            .sum::<f64>()
            / (image.width() * image.height()) as f64;
        let lighting = if luma > 170.0 {
            "bright"
        } else if luma > 85.0 {
            "soft"
        } else {
            "dim"
        };
        let text = format!(
            "a {color} product at the {position} of the frame in {lighting} lighting, surface detail {}",
            &digest[..8]
        );
        let attributes = BTreeMap::from([
            ("color".to_string(), color.to_string()),
            ("position".to_string(), position),
            ("lighting".to_string(), lighting.to_string()),
        ]);
        Ok(Caption { text, attributes })
    }
}

/// Locality-sensitive embedder.
///
/// Layout: `[0, 64)` an 8x8 grayscale thumbnail, `[64, 112)` a 4x4 RGB
/// thumbnail (DINO only), `112` a constant bias, `[113, D)` hashed word
/// buckets. Images contribute their dominant color name as a word, text
/// contributes its own words, which gives image/text similarity some signal.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub dimension: usize,
}

const GRAY_OFFSET: usize = 0;
const COLOR_OFFSET: usize = 64;
const BIAS_INDEX: usize = 112;
const WORD_OFFSET: usize = 113;
pub const MIN_MOCK_DIMENSION: usize = 128;

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dimension: 512 }
    }
}

impl MockEmbedder {
    pub fn new(dimension: usize) -> BackendResult<Self> {
        if dimension < MIN_MOCK_DIMENSION {
            return Err(BackendError::Configuration(format!(
                "mock embedder needs dimension >= {MIN_MOCK_DIMENSION}, got {dimension}"
            )));
        }
        Ok(Self { dimension })
    }

    fn word_bucket(&self, word: &str) -> usize {
        let h = Sha256::digest(word.as_bytes());
        let v = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
        WORD_OFFSET + (v % (self.dimension - WORD_OFFSET) as u64) as usize
    }
}

fn cell_range(i: u32, cells: u32, len: u32) -> std::ops::Range<u32> {
    let start = (i * len / cells).min(len - 1);
    let end = ((i + 1) * len / cells).max(start + 1).min(len);
    start..end
}

fn block_means(image: &Raster, cells: u32, f: impl Fn([u8; 3]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity((cells * cells) as usize);
    for cy in 0..cells {
        for cx in 0..cells {
            let (xr, yr) = (cell_range(cx, cells, image.width()), cell_range(cy, cells, image.height()));
            let mut sum = 0.0;
            let mut n = 0.0;
            for y in yr {
                for x in xr.clone() {
                    sum += f(image.pixel(x, y));
                    n += 1.0;
                }
            }
            out.push(sum / n);
        }
    }
    out
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

impl Embedder for MockEmbedder {
    fn name(&self) -> &str {
        "mock-embedder"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_image_raw(&self, image: &Raster, model: EmbeddingModel) -> BackendResult<EmbeddingVector> {
        let mut v = vec![0.0; self.dimension];
        let gray = block_means(image, 8, |p| (299.0 * p[0] as f64 + 587.0 * p[1] as f64 + 114.0 * p[2] as f64) / 255_000.0);
        v[BIAS_INDEX] = 0.25;
        match model {
            EmbeddingModel::ClipImage => {
                v[GRAY_OFFSET..GRAY_OFFSET + 64].copy_from_slice(&gray);
                let lit = mean_color(image, |x, y| image.pixel(x, y) != [0, 0, 0]).unwrap_or([0.0; 3]);
                v[self.word_bucket(nearest_color_name(lit))] += 2.0;
            }
            EmbeddingModel::Dino => {
                for (i, g) in gray.iter().enumerate() {
                    v[GRAY_OFFSET + i] = 0.5 * g;
                }
                for c in 0..3 {
                    let blocks = block_means(image, 4, |p| p[c] as f64 / 255.0);
                    for (i, b) in blocks.iter().enumerate() {
                        v[COLOR_OFFSET + c * 16 + i] = *b;
                    }
                }
            }
            EmbeddingModel::ClipText => unreachable!("rejected by Embedder::embed_image"),
        }
        Ok(EmbeddingVector::raw(v))
    }

    fn embed_text_raw(&self, text: &str, _model: EmbeddingModel) -> BackendResult<EmbeddingVector> {
        let mut v = vec![0.0; self.dimension];
        v[BIAS_INDEX] = 0.25;
        for word in tokenize(text) {
            v[self.word_bucket(&word)] += 1.0;
        }
        Ok(EmbeddingVector::raw(v))
    }
}

/// Builds context prompts from fixed phrase lists.
#[derive(Debug, Clone, Default)]
pub struct MockLlm;

const PLACEMENTS: [&str; 6] = ["standing", "placed", "arranged", "positioned", "displayed", "set"];
const ROOMS: [&str; 10] = [
    "sunlit loft",
    "cozy reading nook",
    "minimalist studio apartment",
    "rustic farmhouse kitchen",
    "modern office",
    "beach house veranda",
    "mid-century living room",
    "hotel lobby",
    "garden conservatory",
    "urban balcony",
];
const DETAILS: [&str; 10] = [
    "potted ferns on the windowsill",
    "a woven jute rug",
    "floor-to-ceiling bookshelves",
    "exposed brick walls",
    "linen curtains",
    "a vintage record player",
    "terracotta tiles",
    "framed botanical prints",
    "a marble fireplace",
    "hanging pendant lights",
];
const LIGHTING: [&str; 6] = [
    "warm late-afternoon light",
    "soft overcast daylight",
    "golden hour glow",
    "cool morning light",
    "ambient evening lamps",
    "bright midday sun",
];

impl MockLlm {
    /// Category named in the instruction's last double-quoted span.
    fn category_of(instruction: &str) -> Option<&str> {
        let end = instruction.rfind('"')?;
        let start = instruction[..end].rfind('"')?;
        Some(&instruction[start + 1..end]).filter(|s| !s.is_empty())
    }
}

impl TextGenerator for MockLlm {
    fn name(&self) -> &str {
        "mock-llm"
    }

    fn complete(&self, instruction: &str, seed: u64) -> BackendResult<String> {
        let subject = Self::category_of(instruction).unwrap_or("product");
        let mut rng = rng_for(&[b"llm", instruction.as_bytes()], seed);
        Ok(format!(
            "A {subject} {} in a {} with {}, {}.",
            PLACEMENTS[rng.gen_range(0..PLACEMENTS.len())],
            ROOMS[rng.gen_range(0..ROOMS.len())],
            DETAILS[rng.gen_range(0..DETAILS.len())],
            LIGHTING[rng.gen_range(0..LIGHTING.len())],
        ))
    }
}

/// Specs the mock trainer has "trained", keyed by model_ref.
pub type ModelRegistry = Arc<Mutex<BTreeMap<String, TrainingDatasetSpec>>>;

/// Completes every job immediately with `model_ref = digest(spec)`.
#[derive(Debug, Clone, Default)]
pub struct MockTrainer {
    pub registry: ModelRegistry,
    pub failing_tokens: BTreeSet<String>,
}

fn spec_digest(spec: &TrainingDatasetSpec) -> BackendResult<String> {
    digest_of(spec).map_err(|e| BackendError::Validation(e.to_string()))
}

impl Trainer for MockTrainer {
    fn name(&self) -> &str {
        "mock-trainer"
    }

    fn submit_training_job(&self, spec: &TrainingDatasetSpec) -> BackendResult<JobRef> {
        spec.validate().map_err(|e| BackendError::Validation(e.to_string()))?;
        let digest = spec_digest(spec)?;
        self.registry.lock().expect("registry lock").insert(digest.clone(), spec.clone());
        Ok(JobRef(digest))
    }

    fn poll_job(&self, job: &JobRef) -> BackendResult<JobStatus> {
        let registry = self.registry.lock().expect("registry lock");
        let spec = registry
            .get(&job.0)
            .ok_or_else(|| BackendError::Job(format!("unknown job {}", job.0)))?;
        if self.failing_tokens.contains(&spec.token) {
            return Ok(JobStatus::Failed { message: format!("trainer diverged for token {}", spec.token) });
        }
        Ok(JobStatus::Done { model_ref: job.0.clone() })
    }
}

/// Imitates a finetuned model by compositing the product (taken from the
/// training positives) onto a prompt-derived background. Fidelity depends on
/// a per-token quality in `[0, 1]`.
#[derive(Clone, Default)]
pub struct MockSampler {
    pub registry: ModelRegistry,
    pub pixels: Option<Arc<dyn ReferencePixels>>,
    pub token_quality: BTreeMap<String, f64>,
    pub fallback_size: (u32, u32),
}

impl MockSampler {
    pub fn quality(&self, token: &str) -> f64 {
        if let Some(q) = self.token_quality.get(token) {
            return q.clamp(0.0, 1.0);
        }
        let h = Sha256::digest(token.as_bytes());
        0.35 + 0.6 * h[0] as f64 / 255.0
    }

    fn composite(&self, source: &Raster, mask: &Mask, prompt: &str, seed: u64, quality: f64) -> Raster {
        let (w, h) = source.dimensions();
        let background = mock_texture(prompt, seed, w, h);
        let mut rng = rng_for(&[b"sample"], seed);
        let dx: i32 = rng.gen_range(-4..=4);
        let dy: i32 = rng.gen_range(-4..=4);
        let noise = ((1.0 - quality) * 80.0).round() as i32;
        let dropout = (1.0 - quality) * 0.3;
        Raster::from_fn(w, h, |x, y| {
            let (sx, sy) = (x as i32 - dx, y as i32 - dy);
            let inside = sx >= 0 && sy >= 0 && (sx as u32) < w && (sy as u32) < h;
            let jitter: [i32; 3] = std::array::from_fn(|_| if noise > 0 { rng.gen_range(-noise..=noise) } else { 0 });
            let drop = rng.gen_bool(dropout);
            if inside && mask.get(sx as u32, sy as u32) && !drop {
                let p = source.pixel(sx as u32, sy as u32);
                std::array::from_fn(|c| clamp_u8(p[c] as i32 + jitter[c]))
            } else {
                background.pixel(x, y)
            }
        })
    }
}

impl Sampler for MockSampler {
    fn name(&self) -> &str {
        "mock-sampler"
    }

    fn sample_raw(&self, model_ref: &str, prompt: &str, seed: u64, n: usize) -> BackendResult<Vec<Raster>> {
        let spec = self.registry.lock().expect("registry lock").get(model_ref).cloned();
        let (fw, fh) = if self.fallback_size == (0, 0) { (64, 64) } else { self.fallback_size };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = derive_seed(seed, &format!("sample/{i}"));
            let reference = match (&spec, &self.pixels) {
                (Some(spec), Some(pixels)) if !spec.positive_asset_ids.is_empty() => {
                    let pick = &spec.positive_asset_ids[(s % spec.positive_asset_ids.len() as u64) as usize];
                    pixels.reference(pick).map(|(r, m)| {
                        let m = m.unwrap_or_else(|| threshold_segment(&r, DEFAULT_SEGMENT_THRESHOLD));
                        (r, m, self.quality(&spec.token))
                    })
                }
                _ => None,
            };
            out.push(match reference {
                Some((raster, mask, q)) => self.composite(&raster, &mask, prompt, s, q),
                None => mock_texture(&format!("{model_ref}|{prompt}"), s, fw, fh),
            });
        }
        Ok(out)
    }
}

/// Builder for a consistent set of mock backends.
#[derive(Clone, Default)]
pub struct MockSuite {
    pub image_size: Option<(u32, u32)>,
    pub embed_dimension: Option<usize>,
    pub segment_threshold: Option<f64>,
    pub pixels: Option<Arc<dyn ReferencePixels>>,
    pub token_quality: BTreeMap<String, f64>,
    pub failing_tokens: BTreeSet<String>,
    pub registry: ModelRegistry,
}

impl MockSuite {
    pub fn with_pixels(mut self, pixels: Arc<dyn ReferencePixels>) -> Self {
        self.pixels = Some(pixels);
        self
    }

    pub fn with_token_quality(mut self, token: &str, quality: f64) -> Self {
        self.token_quality.insert(token.to_string(), quality);
        self
    }

    pub fn with_failing_token(mut self, token: &str) -> Self {
        self.failing_tokens.insert(token.to_string());
        self
    }

    pub fn into_backends(self) -> Backends {
        let (w, h) = self.image_size.unwrap_or((64, 64));
        Backends {
            images: Arc::new(MockImageGenerator { width: w, height: h }),
            views: Arc::new(MockNovelViews),
            segmenter: Arc::new(MockSegmenter { threshold: self.segment_threshold.unwrap_or(DEFAULT_SEGMENT_THRESHOLD) }),
            captioner: Arc::new(MockCaptioner),
            embedder: Arc::new(MockEmbedder { dimension: self.embed_dimension.unwrap_or(512).max(MIN_MOCK_DIMENSION) }),
            llm: Arc::new(MockLlm),
            trainer: Arc::new(MockTrainer { registry: self.registry.clone(), failing_tokens: self.failing_tokens }),
            sampler: Arc::new(MockSampler {
                registry: self.registry,
                pixels: self.pixels,
                token_quality: self.token_quality,
                fallback_size: (w, h),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::cosine_similarity;

    fn product_image() -> Raster {
        Raster::from_fn(64, 64, |x, y| if (16..40).contains(&x) && (20..52).contains(&y) { [200, 40, 40] } else { [230, 230, 225] })
    }

    #[test]
    fn generate_is_deterministic_and_seed_sensitive() {
        let g = MockImageGenerator::default();
        let a = g.generate_image("a chair", 1).unwrap();
        assert_eq!(a, g.generate_image("a chair", 1).unwrap());
        assert_ne!(a, g.generate_image("a chair", 2).unwrap());
        assert!(matches!(g.generate_image("", 1), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn outpaint_preserves_foreground() {
        let g = MockImageGenerator::default();
        let img = product_image();
        assert_eq!(g.outpaint(&img, &Mask::full(64, 64), "loft", 3).unwrap(), img);
        let regenerated = g.outpaint(&img, &Mask::empty(64, 64), "loft", 3).unwrap();
        assert_eq!(regenerated.dimensions(), (64, 64));
        assert_eq!(regenerated, mock_texture("loft", 3, 64, 64));
    }

    #[test]
    fn half_mask_outpaint_splits_input_and_texture() {
        let g = MockImageGenerator::default();
        let img = product_image();
        let mask = Mask::rectangle(64, 64, 0, 0, 32, 64);
        let out = g.outpaint(&img, &mask, "beach", 9).unwrap();
        let texture = mock_texture("beach", 9, 64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let expected = if x < 32 { img.pixel(x, y) } else { texture.pixel(x, y) };
                assert_eq!(out.pixel(x, y), expected, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn inpaint_mirrors_outpaint() {
        let g = MockImageGenerator::default();
        let img = product_image();
        assert_eq!(g.inpaint(&img, &Mask::empty(64, 64), "vase", 1).unwrap(), img);
        assert_eq!(g.inpaint(&img, &Mask::full(64, 64), "vase", 1).unwrap(), mock_texture("vase", 1, 64, 64));
        let rect = Mask::rectangle(64, 64, 10, 10, 30, 40);
        let out = g.inpaint(&img, &rect, "vase", 1).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !rect.get(x, y) {
                    assert_eq!(out.pixel(x, y), img.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn mask_dimension_mismatch_is_validation_error() {
        let g = MockImageGenerator::default();
        assert!(matches!(g.outpaint(&product_image(), &Mask::full(8, 8), "x", 1), Err(BackendError::Validation(_))));
        assert!(matches!(g.inpaint(&product_image(), &Mask::full(8, 8), "x", 1), Err(BackendError::Validation(_))));
    }

    #[test]
    fn novel_views_anchor_and_determinism() {
        let v = MockNovelViews;
        let img = product_image();
        assert_eq!(v.generate_novel_views(&img, 5, 1).unwrap(), vec![img.clone()]);
        let a = v.generate_novel_views(&img, 5, 4).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, v.generate_novel_views(&img, 5, 4).unwrap());
        let b = v.generate_novel_views(&img, 6, 4).unwrap();
        assert_eq!(a[0], b[0]);
        for i in 1..4 {
            assert_ne!(a[i], b[i], "frame {i}");
        }
        assert!(matches!(v.generate_novel_views(&img, 5, 0), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn segmenter_recovers_rectangle() {
        let s = MockSegmenter::default();
        let mask = s.segment(&product_image(), "chair").unwrap();
        assert_eq!(mask, Mask::rectangle(64, 64, 16, 20, 40, 52));
        assert!(s.segment(&Raster::filled(32, 16, [90, 90, 90]), "chair").unwrap().is_empty());
    }

    #[test]
    fn captions_are_deterministic_and_distinct() {
        let c = MockCaptioner;
        let a = c.caption(&product_image(), "describe").unwrap();
        assert_eq!(a, c.caption(&product_image(), "describe").unwrap());
        assert_eq!(a.attributes["color"], "red");
        assert_eq!(a.attributes["lighting"], "bright");
        let mut other = product_image();
        other.set_pixel(0, 0, [229, 230, 225]);
        assert_ne!(a.text, c.caption(&other, "describe").unwrap().text);
        assert!(matches!(c.caption(&other, " "), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = MockEmbedder::default();
        for model in [EmbeddingModel::ClipImage, EmbeddingModel::Dino] {
            let v = e.embed_image(&product_image(), model).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-6);
            assert_eq!(v.dimension(), 512);
        }
        let t = e.embed_text("a red chair", EmbeddingModel::ClipText).unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-6);
        assert!(matches!(e.embed_image(&product_image(), EmbeddingModel::ClipText), Err(BackendError::Configuration(_))));
        assert!(matches!(e.embed_text("x", EmbeddingModel::Dino), Err(BackendError::Configuration(_))));
        let black = e.embed_image(&Raster::filled(4, 4, [0, 0, 0]), EmbeddingModel::Dino).unwrap();
        assert!((black.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn color_words_align_image_and_text() {
        let e = MockEmbedder::default();
        let img = e.embed_image(&Raster::filled(16, 16, [200, 40, 40]), EmbeddingModel::ClipImage).unwrap();
        let red = e.embed_text("a red chair", EmbeddingModel::ClipText).unwrap();
        let blue = e.embed_text("a blue chair", EmbeddingModel::ClipText).unwrap();
        assert!(cosine_similarity(&img, &red).unwrap() > cosine_similarity(&img, &blue).unwrap());
    }

    #[test]
    fn llm_prompts_mention_category() {
        let llm = MockLlm;
        let p = llm.complete("Describe a scene for a photo of a \"dining table\".", 3).unwrap();
        assert!(p.starts_with("A dining table "));
        assert_eq!(p, llm.complete("Describe a scene for a photo of a \"dining table\".", 3).unwrap());
    }

    #[test]
    fn embedder_rejects_tiny_dimension() {
        assert!(MockEmbedder::new(64).is_err());
        assert!(MockEmbedder::new(128).is_ok());
    }
}
