//! Similarity metrics and the training-data filters built on them.
//!
//! Six metrics are computed per image: CLIP-I and DINO-I against a set of
//! reference photos, CLIP-T against the prompt, and the same three on
//! foreground-only crops. The IoU filter rejects outpaints whose product
//! silhouette drifted from the mask that was preserved.

use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::backend::{BackendError, Embedder, EmbeddingModel, EmbeddingVector};
use crate::manifest::FilteredItem;
use crate::model::{MetricKey, MetricVector, SegmentedScores};
use crate::raster::{Mask, Raster};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(String, String),
    #[error("degenerate mask: no foreground pixels")]
    DegenerateMask,
    #[error("at least one reference image is required")]
    EmptyReferences,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("writing report: {0}")]
    Report(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type FilterResult<T> = Result<T, FilterError>;

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`; 0 when either norm is 0.
pub fn cosine(a: &[f64], b: &[f64]) -> FilterResult<f64> {
    if a.len() != b.len() {
        return Err(FilterError::DimensionMismatch(a.len().to_string(), b.len().to_string()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> FilterResult<f64> {
    cosine(&a.values, &b.values)
}

/// Background zeroed, cropped to the foreground bounding box, zero-padded to a centered square.
pub fn isolate_foreground(image: &Raster, mask: &Mask) -> FilterResult<Raster> {
    if image.dimensions() != mask.dimensions() {
        return Err(FilterError::DimensionMismatch(
            format!("{:?}", image.dimensions()),
            format!("{:?}", mask.dimensions()),
        ));
    }
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(FilterError::DegenerateMask)?;
    let (w, h) = (x1 - x0, y1 - y0);
    let side = w.max(h);
    let (ox, oy) = ((side - w) / 2, (side - h) / 2);
    Ok(Raster::from_fn(side, side, |x, y| {
        if x < ox || y < oy || x - ox >= w || y - oy >= h {
            return [0, 0, 0];
        }
        let (sx, sy) = (x0 + x - ox, y0 + y - oy);
        if mask.get(sx, sy) {
            image.pixel(sx, sy)
        } else {
            [0, 0, 0]
        }
    }))
}

pub fn segmented_embed(
    embedder: &dyn Embedder,
    image: &Raster,
    mask: &Mask,
    model: EmbeddingModel,
) -> FilterResult<EmbeddingVector> {
    Ok(embedder.embed_image(&isolate_foreground(image, mask)?, model)?)
}

/// An image to score, with its product mask when one is known.
#[derive(Debug, Clone, Copy)]
pub struct MetricInput<'a> {
    pub image: &'a Raster,
    pub mask: Option<&'a Mask>,
}

impl<'a> MetricInput<'a> {
    pub fn new(image: &'a Raster, mask: Option<&'a Mask>) -> Self {
        Self { image, mask: mask.filter(|m| !m.is_empty()) }
    }
}

struct Embedded {
    clip: EmbeddingVector,
    dino: EmbeddingVector,
    seg: Option<(EmbeddingVector, EmbeddingVector)>,
}

fn embed_all(embedder: &dyn Embedder, input: MetricInput<'_>) -> FilterResult<Embedded> {
    let seg = match input.mask {
        Some(mask) => Some((
            segmented_embed(embedder, input.image, mask, EmbeddingModel::ClipImage)?,
            segmented_embed(embedder, input.image, mask, EmbeddingModel::Dino)?,
        )),
        None => None,
    };
    Ok(Embedded {
        clip: embedder.embed_image(input.image, EmbeddingModel::ClipImage)?,
        dino: embedder.embed_image(input.image, EmbeddingModel::Dino)?,
        seg,
    })
}

/// Reference photos embedded once and reused for every scored image.
pub struct ReferenceSet {
    refs: Vec<Embedded>,
}

impl ReferenceSet {
    pub fn embed(embedder: &dyn Embedder, refs: &[MetricInput<'_>]) -> FilterResult<Self> {
        if refs.is_empty() {
            return Err(FilterError::EmptyReferences);
        }
        Ok(Self { refs: refs.iter().map(|r| embed_all(embedder, *r)).collect::<FilterResult<_>>()? })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    fn all_masked(&self) -> bool {
        self.refs.iter().all(|r| r.seg.is_some())
    }
}

fn mean_cosine<'a>(v: &EmbeddingVector, refs: impl Iterator<Item = &'a EmbeddingVector>) -> FilterResult<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in refs {
        sum += cosine_similarity(v, r)?;
        n += 1;
    }
    Ok(sum / n as f64)
}

/// Scores `gen` against `refs` and `prompt`. Segmented components are present
/// only when the generated image and every reference carry a mask.
pub fn compute_metric_vector(
    embedder: &dyn Embedder,
    gen: MetricInput<'_>,
    refs: &ReferenceSet,
    prompt: &str,
) -> FilterResult<MetricVector> {
    if refs.is_empty() {
        return Err(FilterError::EmptyReferences);
    }
    let g = embed_all(embedder, gen)?;
    let text = embedder.embed_text(prompt, EmbeddingModel::ClipText)?;
    let clip_i = mean_cosine(&g.clip, refs.refs.iter().map(|r| &r.clip))?;
    let dino_i = mean_cosine(&g.dino, refs.refs.iter().map(|r| &r.dino))?;
    let clip_t = cosine_similarity(&g.clip, &text)?;
    let segmented = match (&g.seg, refs.all_masked()) {
        (Some((seg_clip, seg_dino)), true) => Some(SegmentedScores {
            seg_clip_i: mean_cosine(seg_clip, refs.refs.iter().filter_map(|r| r.seg.as_ref().map(|s| &s.0)))?,
            seg_clip_t: cosine_similarity(seg_clip, &text)?,
            seg_dino_i: mean_cosine(seg_dino, refs.refs.iter().filter_map(|r| r.seg.as_ref().map(|s| &s.1)))?,
        }),
        _ => None,
    };
    Ok(MetricVector::new(clip_i, clip_t, dino_i, segmented))
}

/// `|a ∩ b| / |a ∪ b|`, defined as 1 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> FilterResult<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(FilterError::DimensionMismatch(format!("{:?}", a.dimensions()), format!("{:?}", b.dimensions())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// An outpainted image's fresh segmentation and the mask that was preserved when outpainting it.
#[derive(Debug, Clone)]
pub struct IouCandidate {
    pub asset_id: String,
    pub outpainted_mask: Option<Mask>,
    pub reference_mask: Option<Mask>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouOutcome {
    pub kept: Vec<String>,
    pub rejected: Vec<FilteredItem>,
    pub report: Vec<ReportRow>,
}

/// Keeps candidates with IoU >= `threshold`. Unscorable candidates are rejected with a reason.
pub fn filter_by_iou(candidates: &[IouCandidate], threshold: f64) -> IouOutcome {
    let mut out = IouOutcome::default();
    for c in candidates {
        let (score, reason) = match (&c.outpainted_mask, &c.reference_mask) {
            (Some(a), Some(b)) => match mask_iou(a, b) {
                Ok(iou) if iou >= threshold => (Some(iou), None),
                Ok(iou) => (Some(iou), Some(format!("iou {iou:.4} below {threshold}"))),
                Err(e) => (None, Some(e.to_string())),
            },
            (None, _) => (None, Some("outpainted image has no mask".to_string())),
            (_, None) => (None, Some("reference mask missing".to_string())),
        };
        let decision = if reason.is_none() { "kept" } else { "rejected" };
        out.report.push(ReportRow::new(&c.asset_id, "iou", score, decision, threshold));
        match reason {
            None => out.kept.push(c.asset_id.clone()),
            Some(reason) => out.rejected.push(FilteredItem::new(&c.asset_id, reason, score)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredAsset {
    pub asset_id: String,
    pub metrics: MetricVector,
}

impl ScoredAsset {
    pub fn new(asset_id: impl Into<String>, metrics: MetricVector) -> Self {
        Self { asset_id: asset_id.into(), metrics }
    }
}

/// Descending by score, then ascending by asset_id.
pub(crate) fn rank_order(a: (f64, &str), b: (f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Top `k` by `key`. Candidates lacking the key are skipped.
pub fn select_top_rated(candidates: &[ScoredAsset], k: usize, key: MetricKey) -> Vec<ScoredAsset> {
    let mut scored: Vec<(f64, &ScoredAsset)> =
        candidates.iter().filter_map(|c| c.metrics.get(key).map(|s| (s, c))).collect();
    scored.sort_by(|a, b| rank_order((a.0, &a.1.asset_id), (b.0, &b.1.asset_id)));
    scored.into_iter().take(k).map(|(_, c)| c.clone()).collect()
}

/// One line of `filter_report.csv` or `rank_report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub asset_id: String,
    pub metric: String,
    pub score: Option<f64>,
    pub decision: String,
    pub threshold: f64,
}

impl ReportRow {
    pub fn new(asset_id: &str, metric: &str, score: Option<f64>, decision: &str, threshold: f64) -> Self {
        Self {
            asset_id: asset_id.to_string(),
            metric: metric.to_string(),
            score,
            decision: decision.to_string(),
            threshold,
        }
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> FilterResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["asset_id", "metric", "score", "decision", "threshold"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockEmbedder;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0, 1e-12));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2, 1e-12));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = Mask::rectangle(10, 10, 0, 0, 10, 5);
        let b = Mask::full(10, 10);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.5);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = Mask::rectangle(10, 10, 0, 5, 10, 10);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert_eq!(mask_iou(&Mask::empty(3, 3), &Mask::empty(3, 3)).unwrap(), 1.0);
        assert!(mask_iou(&a, &Mask::empty(3, 3)).is_err());
    }

    #[test]
    fn full_mask_segmented_embed_is_plain_embed() {
        let e = MockEmbedder::default();
        let img = Raster::from_fn(12, 12, |x, y| [(x * 20) as u8, (y * 20) as u8, 77]);
        let seg = segmented_embed(&e, &img, &Mask::full(12, 12), EmbeddingModel::ClipImage).unwrap();
        assert_eq!(seg, e.embed_image(&img, EmbeddingModel::ClipImage).unwrap());
        assert!(matches!(
            segmented_embed(&e, &img, &Mask::empty(12, 12), EmbeddingModel::Dino),
            Err(FilterError::DegenerateMask)
        ));
    }

    #[test]
    fn segmented_embed_ignores_background() {
        let e = MockEmbedder::default();
        let mask = Mask::rectangle(20, 20, 4, 6, 12, 16);
        let a = Raster::from_fn(20, 20, |x, y| if mask.get(x, y) { [200, 40, 40] } else { [10, 200, 10] });
        let b = Raster::from_fn(20, 20, |x, y| if mask.get(x, y) { [200, 40, 40] } else { [(x * 9) as u8, 0, 255] });
        for model in [EmbeddingModel::ClipImage, EmbeddingModel::Dino] {
            assert_eq!(segmented_embed(&e, &a, &mask, model).unwrap(), segmented_embed(&e, &b, &mask, model).unwrap());
        }
    }

    #[test]
    fn isolate_pads_to_centered_square() {
        let mask = Mask::rectangle(10, 10, 2, 3, 6, 5);
        let img = Raster::filled(10, 10, [9, 9, 9]);
        let out = isolate_foreground(&img, &mask).unwrap();
        assert_eq!(out.dimensions(), (4, 4));
        assert_eq!(out.pixel(0, 0), [0, 0, 0]);
        assert_eq!(out.pixel(0, 1), [9, 9, 9]);
        assert_eq!(out.pixel(3, 2), [9, 9, 9]);
        assert_eq!(out.pixel(3, 3), [0, 0, 0]);
    }

    #[test]
    fn identical_generated_and_reference_score_one() {
        let e = MockEmbedder::default();
        let img = Raster::from_fn(16, 16, |x, y| [(x * 15) as u8, (y * 15) as u8, 100]);
        let refs = ReferenceSet::embed(&e, &[MetricInput::new(&img, None)]).unwrap();
        let m = compute_metric_vector(&e, MetricInput::new(&img, None), &refs, "a blue chair").unwrap();
        assert!(close(m.clip_i, 1.0, 1e-12));
        assert!(close(m.dino_i, 1.0, 1e-12));
        assert_eq!(m.seg_clip_i, None);
        assert_eq!(m.aggregate, m.clip_i + m.clip_t + m.dino_i);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn clip_i_is_mean_of_pairwise_cosines() {
        let e = MockEmbedder::default();
        let gen = Raster::from_fn(16, 16, |x, y| [(x * 10) as u8, 90, (y * 12) as u8]);
        let r1 = Raster::from_fn(16, 16, |x, _| [(x * 16) as u8, 30, 30]);
        let r2 = Raster::from_fn(16, 16, |_, y| [20, (y * 16) as u8, 200]);
        let refs = ReferenceSet::embed(&e, &[MetricInput::new(&r1, None), MetricInput::new(&r2, None)]).unwrap();
        let m = compute_metric_vector(&e, MetricInput::new(&gen, None), &refs, "chair").unwrap();
        let dot = |a: &EmbeddingVector, b: &EmbeddingVector| a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>();
        let g = e.embed_image(&gen, EmbeddingModel::ClipImage).unwrap();
        let expected = (dot(&g, &e.embed_image(&r1, EmbeddingModel::ClipImage).unwrap())
            + dot(&g, &e.embed_image(&r2, EmbeddingModel::ClipImage).unwrap()))
            / 2.0;
        assert!(close(m.clip_i, expected, 1e-12));
    }

    #[test]
    fn segmented_scores_need_masks_everywhere() {
        let e = MockEmbedder::default();
        let img = Raster::filled(8, 8, [100, 100, 100]);
        let mask = Mask::rectangle(8, 8, 2, 2, 6, 6);
        let refs = ReferenceSet::embed(&e, &[MetricInput::new(&img, Some(&mask)), MetricInput::new(&img, None)]).unwrap();
        let m = compute_metric_vector(&e, MetricInput::new(&img, Some(&mask)), &refs, "lamp").unwrap();
        assert_eq!(m.seg_dino_i, None);
        let refs = ReferenceSet::embed(&e, &[MetricInput::new(&img, Some(&mask))]).unwrap();
        let m = compute_metric_vector(&e, MetricInput::new(&img, Some(&mask)), &refs, "lamp").unwrap();
        assert!(m.seg_dino_i.is_some());
        assert!(matches!(ReferenceSet::embed(&e, &[]), Err(FilterError::EmptyReferences)));
    }

    #[test]
    fn iou_filter_boundary_and_missing_masks() {
        let reference = Mask::rectangle(10, 10, 0, 0, 10, 5);
        let cands = vec![
            IouCandidate { asset_id: "a".into(), outpainted_mask: Some(reference.clone()), reference_mask: Some(reference.clone()) },
            IouCandidate { asset_id: "b".into(), outpainted_mask: Some(Mask::full(10, 10)), reference_mask: Some(reference.clone()) },
            IouCandidate { asset_id: "c".into(), outpainted_mask: None, reference_mask: Some(reference.clone()) },
        ];
        let out = filter_by_iou(&cands, 0.5);
        assert_eq!(out.kept, vec!["a", "b"]);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].asset_id, "c");
        let out = filter_by_iou(&cands, 0.85);
        assert_eq!(out.kept, vec!["a"]);
        assert_eq!(out.rejected[0].score, Some(0.5));
        assert_eq!(out.report.len(), 3);
    }

    #[test]
    fn top_rated_examples() {
        let m = |s: f64| MetricVector::new(s, 0.0, 0.0, None);
        let c = vec![ScoredAsset::new("A", m(0.9)), ScoredAsset::new("B", m(0.7)), ScoredAsset::new("C", m(0.8))];
        let ids = |v: Vec<ScoredAsset>| v.into_iter().map(|s| s.asset_id).collect::<Vec<_>>();
        assert_eq!(ids(select_top_rated(&c, 2, MetricKey::ClipI)), ["A", "C"]);
        assert_eq!(ids(select_top_rated(&c, 10, MetricKey::Aggregate)), ["A", "C", "B"]);
        let tie = vec![ScoredAsset::new("B", m(0.5)), ScoredAsset::new("A", m(0.5))];
        assert_eq!(ids(select_top_rated(&tie, 1, MetricKey::ClipI)), ["A"]);
        assert!(select_top_rated(&c, 2, MetricKey::SegClipI).is_empty());
    }

    #[test]
    fn report_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs/r/filter_report.csv");
        write_report(&path, &[ReportRow::new("a", "iou", Some(0.5), "rejected", 0.85), ReportRow::new("b", "iou", None, "rejected", 0.85)])
            .unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "asset_id,metric,score,decision,threshold\na,iou,0.5,rejected,0.85\nb,iou,,rejected,0.85\n");
    }

    fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
        (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n))
                .prop_map(move |(a, b)| (Mask::new(w, h, a).unwrap(), Mask::new(w, h, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric((a, b) in mask_strategy()) {
            prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
            let v = mask_iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn iou_with_self_is_one((a, _) in mask_strategy()) {
            prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn iou_grows_when_intersection_grows((a, b) in mask_strategy(), idx in any::<prop::sample::Index>()) {
            // Adding a pixel of `b` to `a` can only raise |a ∩ b| / |a ∪ b|.
            let on: Vec<usize> = b.bits().iter().enumerate().filter(|(i, &v)| v && !a.bits()[*i]).map(|(i, _)| i).collect();
            prop_assume!(!on.is_empty());
            let mut bits = a.bits().to_vec();
            bits[on[idx.index(on.len())]] = true;
            let grown = Mask::new(a.width(), a.height(), bits).unwrap();
            prop_assert!(mask_iou(&grown, &b).unwrap() >= mask_iou(&a, &b).unwrap());
        }

        #[test]
        fn top_rated_matches_sort_oracle(scores in proptest::collection::vec(0u8..20, 0..200), k in 1usize..50) {
            let cands: Vec<ScoredAsset> = scores
                .iter()
                .enumerate()
                .map(|(i, s)| ScoredAsset::new(format!("a{:04}", (i * 7919) % 10007), MetricVector::new(*s as f64 / 20.0, 0.0, 0.0, None)))
                .collect();
            let mut oracle: Vec<(f64, String)> = cands.iter().map(|c| (c.metrics.aggregate, c.asset_id.clone())).collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            oracle.truncate(k);
            let got: Vec<String> = select_top_rated(&cands, k, MetricKey::Aggregate).into_iter().map(|c| c.asset_id).collect();
            prop_assert_eq!(got, oracle.into_iter().map(|o| o.1).collect::<Vec<_>>());
        }
    }
}
