//! Post-finetuning ranking and the evaluation statistics reported for a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::backend::Embedder;
use crate::filtering::{compute_metric_vector, rank_order, FilterError, MetricInput, ReferenceSet, ReportRow, ScoredAsset};
use crate::model::{MetricKey, MetricVector};
use crate::parallel::bounded_map;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("n must be at least 1")]
    ZeroN,
    #[error("no prompt recorded for generated image {0}")]
    MissingPrompt(String),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least two points")]
    TooFewPoints,
    #[error("correlation is undefined for a constant series")]
    UndefinedCorrelation,
    #[error("uplift is undefined when the baseline rate is 0")]
    UndefinedUplift,
    #[error("verdict set is empty")]
    EmptyVerdicts,
    #[error(transparent)]
    Filter(#[from] FilterError),
}

pub type RankResult<T> = Result<T, RankError>;

/// Drops aggregates below `threshold`, then takes the top `n` (ties by id).
pub fn rank_scored(scored: &[ScoredAsset], n: usize, threshold: f64) -> Vec<ScoredAsset> {
    let mut kept: Vec<&ScoredAsset> = scored.iter().filter(|s| s.metrics.aggregate >= threshold).collect();
    kept.sort_by(|a, b| rank_order((a.metrics.aggregate, &a.asset_id), (b.metrics.aggregate, &b.asset_id)));
    kept.into_iter().take(n).cloned().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOutcome {
    /// Every image with its metrics, in input order.
    pub scored: Vec<ScoredAsset>,
    pub ranked: Vec<ScoredAsset>,
}

impl RankOutcome {
    /// One `rank_report.csv` row per image.
    pub fn report_rows(&self, threshold: f64) -> Vec<ReportRow> {
        let ranked: BTreeMap<&str, usize> = self.ranked.iter().enumerate().map(|(i, s)| (s.asset_id.as_str(), i)).collect();
        let mut rows = self.scored.clone();
        rows.sort_by(|a, b| rank_order((a.metrics.aggregate, &a.asset_id), (b.metrics.aggregate, &b.asset_id)));
        rows.iter()
            .map(|s| {
                let decision = match ranked.get(s.asset_id.as_str()) {
                    Some(i) => format!("ranked_{}", i + 1),
                    None if s.metrics.aggregate < threshold => "below_threshold".to_string(),
                    None => "beyond_top_n".to_string(),
                };
                ReportRow::new(&s.asset_id, "aggregate", Some(s.metrics.aggregate), &decision, threshold)
            })
            .collect()
    }
}

/// Scores each generated image against `refs` and its prompt, then ranks.
pub fn rank_generated(
    embedder: &dyn Embedder,
    images: &[(String, MetricInput<'_>)],
    refs: &ReferenceSet,
    prompts: &BTreeMap<String, String>,
    n: usize,
    threshold: f64,
    concurrency: usize,
) -> RankResult<RankOutcome> {
    if n == 0 {
        return Err(RankError::ZeroN);
    }
    if refs.is_empty() {
        return Err(RankError::Filter(FilterError::EmptyReferences));
    }
    let results = bounded_map(images, concurrency, |(id, input)| -> RankResult<ScoredAsset> {
        let prompt = prompts.get(id).ok_or_else(|| RankError::MissingPrompt(id.clone()))?;
        Ok(ScoredAsset::new(id.as_str(), compute_metric_vector(embedder, *input, refs, prompt)?))
    });
    let scored = results.into_iter().collect::<RankResult<Vec<_>>>()?;
    let ranked = rank_scored(&scored, n, threshold);
    Ok(RankOutcome { scored, ranked })
}

/// Passing fraction; 0 for no verdicts.
pub fn per_image_pass_rate(verdicts: &[bool]) -> f64 {
    if verdicts.is_empty() {
        return 0.0;
    }
    verdicts.iter().filter(|v| **v).count() as f64 / verdicts.len() as f64
}

/// Fraction of products with at least one passing image; 0 for no products.
pub fn per_product_pass_rate(verdicts_by_product: &BTreeMap<String, Vec<bool>>) -> f64 {
    if verdicts_by_product.is_empty() {
        return 0.0;
    }
    let passing = verdicts_by_product.values().filter(|v| v.iter().any(|x| *x)).count();
    passing as f64 / verdicts_by_product.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> RankResult<f64> {
    if x.len() != y.len() {
        return Err(RankError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(RankError::TooFewPoints);
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(RankError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `(after - before) / before`.
pub fn uplift_from_rates(rate_before: f64, rate_after: f64) -> RankResult<f64> {
    if rate_before == 0.0 {
        return Err(RankError::UndefinedUplift);
    }
    Ok((rate_after - rate_before) / rate_before)
}

/// Relative change in per-image pass rate from `before` to `after`.
pub fn ranking_uplift(before: &[bool], after: &[bool]) -> RankResult<f64> {
    if before.is_empty() || after.is_empty() {
        return Err(RankError::EmptyVerdicts);
    }
    uplift_from_rates(per_image_pass_rate(before), per_image_pass_rate(after))
}

/// Mean of each metric over one dataset's generated images.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSection {
    pub dataset: String,
    pub images: usize,
    /// Row per component in report order; `None` when no image had that component.
    pub rows: Vec<(MetricKey, Option<f64>)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub sections: Vec<ReportSection>,
    /// Datasets skipped for having no images.
    pub skipped: Vec<String>,
}

pub fn build_metrics_report<'a>(datasets: impl IntoIterator<Item = (&'a str, &'a [MetricVector])>) -> MetricsReport {
    let mut report = MetricsReport::default();
    for (name, vectors) in datasets {
        if vectors.is_empty() {
            report.skipped.push(name.to_string());
            continue;
        }
        let rows = MetricKey::COMPONENTS
            .iter()
            .map(|&key| {
                let present: Vec<f64> = vectors.iter().filter_map(|v| v.get(key)).collect();
                let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
                (key, mean)
            })
            .collect();
        report.sections.push(ReportSection { dataset: name.to_string(), images: vectors.len(), rows });
    }
    report
}

impl MetricsReport {
    /// Plain-text table, one six-row block per dataset.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            let _ = writeln!(out, "dataset: {} ({} images)", s.dataset, s.images);
            let _ = writeln!(out, "{:<10} {:>8}", "metric", "mean");
            for (key, v) in &s.rows {
                let cell = v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
                let _ = writeln!(out, "{:<10} {:>8}", key.label(), cell);
            }
            out.push('\n');
        }
        for name in &self.skipped {
            let _ = writeln!(out, "dataset: {name} (0 images) skipped: no generated images\n");
        }
        out
    }
}

/// Correlation of human scores with each automatic metric. Entries whose
/// correlation is undefined carry the reason.
pub fn correlation_report(metrics: &[MetricVector], human: &[f64]) -> Vec<(MetricKey, Result<f64, String>)> {
    std::iter::once(MetricKey::Aggregate)
        .chain(MetricKey::COMPONENTS)
        .map(|key| {
            let pairs: Vec<(f64, f64)> =
                metrics.iter().zip(human).filter_map(|(m, h)| m.get(key).map(|v| (v, *h))).collect();
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            (key, pearson_correlation(&x, &y).map_err(|e| e.to_string()))
        })
        .collect()
}
