//! Append-only run manifests.
//!
//! A manifest is a header line followed by one canonical JSON line per
//! [`StageRecord`]. Each record carries the SHA-256 of its own canonical form
//! (with `content_hash` blanked), so replaying a run with identical seeds and
//! mock backends reproduces the identical hash sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{sha256_hex, to_canonical_string};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("stage record has an empty stage_name")]
    EmptyStageName,
    #[error("manifest record {index} would be altered ({reason})")]
    Immutable { index: usize, reason: String },
    #[error("manifest belongs to {found}, expected {expected}")]
    WrongRun { expected: String, found: String },
    #[error("manifest has no header line")]
    MissingHeader,
    #[error("malformed manifest line {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An asset removed by a stage, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredItem {
    pub asset_id: String,
    pub reason: String,
    pub score: Option<f64>,
}

impl FilteredItem {
    pub fn new(asset_id: impl Into<String>, reason: impl Into<String>, score: Option<f64>) -> Self {
        Self { asset_id: asset_id.into(), reason: reason.into(), score }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub filtered: Vec<FilteredItem>,
    pub config_snapshot: serde_json::Value,
    #[serde(default)]
    pub content_hash: String,
}

impl StageRecord {
    pub fn new(stage_name: impl Into<String>) -> Self {
        Self {
            stage_name: stage_name.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            filtered: Vec::new(),
            config_snapshot: serde_json::Value::Null,
            content_hash: String::new(),
        }
    }

    pub fn inputs(mut self, ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.inputs = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn outputs(mut self, ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.outputs = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn filtered(mut self, items: Vec<FilteredItem>) -> Self {
        self.filtered = items;
        self
    }

    pub fn snapshot<T: Serialize>(mut self, config: &T) -> Self {
        self.config_snapshot = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    /// Digest of the canonical serialization with `content_hash` blanked.
    pub fn compute_hash(&self) -> Result<String, serde_json::Error> {
        let mut unhashed = self.clone();
        unhashed.content_hash.clear();
        Ok(sha256_hex(to_canonical_string(&unhashed)?.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    run_id: String,
    product_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineManifest {
    run_id: String,
    product_id: String,
    records: Vec<StageRecord>,
}

impl PipelineManifest {
    pub fn new(run_id: impl Into<String>, product_id: impl Into<String>) -> Self {
        Self { run_id: run_id.into(), product_id: product_id.into(), records: Vec::new() }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn product_id(&self) -> &str {
        &self.product_id
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn content_hashes(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.content_hash.as_str()).collect()
    }

    pub fn has_stage(&self, stage_name: &str) -> bool {
        self.records.iter().any(|r| r.stage_name == stage_name)
    }

    /// Latest record for `stage_name`.
    pub fn last_stage(&self, stage_name: &str) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.stage_name == stage_name)
    }

    /// Appends in place; see [`append_stage`].
    pub fn push(&mut self, mut record: StageRecord) -> Result<&StageRecord, ManifestError> {
        if record.stage_name.trim().is_empty() {
            return Err(ManifestError::EmptyStageName);
        }
        record.content_hash = record.compute_hash()?;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Recomputes every record hash and reports the first mismatch.
    pub fn verify(&self) -> Result<(), ManifestError> {
        for (index, record) in self.records.iter().enumerate() {
            if record.compute_hash()? != record.content_hash {
                return Err(ManifestError::Immutable { index, reason: "content hash mismatch".into() });
            }
        }
        Ok(())
    }

    /// Fails unless `self` extends `earlier` without touching its records.
    pub fn ensure_extends(&self, earlier: &PipelineManifest) -> Result<(), ManifestError> {
        if self.run_id != earlier.run_id || self.product_id != earlier.product_id {
            return Err(ManifestError::WrongRun {
                expected: format!("{}/{}", earlier.product_id, earlier.run_id),
                found: format!("{}/{}", self.product_id, self.run_id),
            });
        }
        if self.records.len() < earlier.records.len() {
            return Err(ManifestError::Immutable {
                index: self.records.len(),
                reason: "records would be removed".into(),
            });
        }
        for (index, (new, old)) in self.records.iter().zip(&earlier.records).enumerate() {
            if new != old {
                return Err(ManifestError::Immutable { index, reason: "record contents differ".into() });
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String, ManifestError> {
        let mut out = to_canonical_string(&ManifestHeader {
            run_id: self.run_id.clone(),
            product_id: self.product_id.clone(),
        })?;
        out.push('\n');
        for record in &self.records {
            out.push_str(&to_canonical_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self, ManifestError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines.next().ok_or(ManifestError::MissingHeader)?;
        let header: ManifestHeader =
            serde_json::from_str(header_line).map_err(|source| ManifestError::Malformed { line: 1, source })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            records.push(serde_json::from_str(line).map_err(|source| ManifestError::Malformed { line: i + 1, source })?);
        }
        Ok(Self { run_id: header.run_id, product_id: header.product_id, records })
    }
}

/// Returns `manifest` with `record` appended and hashed.
pub fn append_stage(mut manifest: PipelineManifest, record: StageRecord) -> Result<PipelineManifest, ManifestError> {
    manifest.push(record)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> StageRecord {
        StageRecord::new("filter")
            .inputs(["a", "b"])
            .outputs(["a"])
            .filtered(vec![FilteredItem::new("b", "iou_below_threshold", Some(0.5))])
            .snapshot(&serde_json::json!({"threshold": 0.85, "key": "aggregate"}))
    }

    #[test]
    fn append_to_empty_manifest() {
        let m = append_stage(PipelineManifest::new("r", "p"), record()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records()[0].content_hash.len(), 64);
        m.verify().unwrap();
    }

    #[test]
    fn identical_records_hash_identically() {
        let m = append_stage(PipelineManifest::new("r", "p"), record()).unwrap();
        let m = append_stage(m, record()).unwrap();
        assert_eq!(m.records()[0].content_hash, m.records()[1].content_hash);
    }

    #[test]
    fn prior_records_untouched_by_append() {
        let m1 = append_stage(PipelineManifest::new("r", "p"), record()).unwrap();
        let before = m1.records()[0].clone();
        let m2 = append_stage(m1.clone(), StageRecord::new("rank")).unwrap();
        assert_eq!(m2.records()[0], before);
        m2.ensure_extends(&m1).unwrap();
    }

    #[test]
    fn empty_stage_name_rejected() {
        assert!(matches!(
            append_stage(PipelineManifest::new("r", "p"), StageRecord::new(" ")),
            Err(ManifestError::EmptyStageName)
        ));
    }

    #[test]
    fn reordered_snapshot_keys_hash_the_same() {
        // Same record built from two key orders of the snapshot text.
        let a: serde_json::Value = serde_json::from_str(r#"{"threshold":0.85,"key":"aggregate","n":{"b":1,"a":2}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"n":{"a":2,"b":1},"key":"aggregate","threshold":0.85}"#).unwrap();
        let ra = StageRecord::new("filter").snapshot(&a);
        let rb = StageRecord::new("filter").snapshot(&b);
        assert_eq!(ra.compute_hash().unwrap(), rb.compute_hash().unwrap());
    }

    #[test]
    fn rewriting_history_is_rejected() {
        let m1 = append_stage(PipelineManifest::new("r", "p"), record()).unwrap();
        let mut tampered = PipelineManifest::new("r", "p");
        tampered.push(StageRecord::new("filter").outputs(["b"])).unwrap();
        assert!(matches!(tampered.ensure_extends(&m1), Err(ManifestError::Immutable { index: 0, .. })));
        assert!(matches!(
            PipelineManifest::new("r", "p").ensure_extends(&m1),
            Err(ManifestError::Immutable { .. })
        ));
    }

    #[test]
    fn text_round_trip() {
        let m = append_stage(append_stage(PipelineManifest::new("r", "p"), record()).unwrap(), StageRecord::new("x"))
            .unwrap();
        let back = PipelineManifest::from_text(&m.to_text().unwrap()).unwrap();
        assert_eq!(back, m);
        back.verify().unwrap();
    }

    #[test]
    fn tampered_text_fails_verification() {
        let m = append_stage(PipelineManifest::new("r", "p"), record()).unwrap();
        let text = m.to_text().unwrap().replace("\"outputs\":[\"a\"]", "\"outputs\":[\"z\"]");
        let back = PipelineManifest::from_text(&text).unwrap();
        assert!(back.verify().is_err());
    }
}
