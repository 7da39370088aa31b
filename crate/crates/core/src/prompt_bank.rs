//! Offline cache of LLM-drafted context prompts, curated by hand and keyed by
//! product category.
//!
//! Each category lives in `<dir>/<slug>.prompts` (one canonical JSON entry per
//! line) with curation decisions appended to `<dir>/<slug>.audit`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::mock::CLASSIFY_INSTRUCTION;
use crate::backend::{BackendError, Captioner, TextGenerator};
use crate::canonical::{derive_id, derive_seed, to_canonical_string};
use crate::model::{EntryStatus, ProductRecord, PromptBankEntry};
use crate::raster::Raster;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("category must not be empty")]
    EmptyCategory,
    #[error("prompt bank entry {0} not found")]
    NotFound(String),
    #[error("no approved prompts for category {0:?}")]
    EmptyBank(String),
    #[error("persisted {persisted} of {requested} prompts for {category:?} before the LLM failed: {source}")]
    Partial {
        category: String,
        persisted: usize,
        requested: usize,
        source: BackendError,
    },
    #[error("cannot classify product {product_id}: {reason}")]
    Classification { product_id: String, reason: String },
    #[error("malformed bank file {path}: line {line}: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type BankResult<T> = Result<T, BankError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BankError + '_ {
    move |source| BankError::Io { path: path.to_path_buf(), source }
}

/// Review outcome for a pending entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approved,
    Rejected,
}

impl From<Decision> for EntryStatus {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Approved => EntryStatus::Approved,
            Decision::Rejected => EntryStatus::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLine {
    pub entry_id: String,
    pub category: String,
    pub previous: EntryStatus,
    pub decision: Decision,
    pub reviewer: String,
    pub at: chrono::DateTime<Utc>,
}

/// File-name form of a category: lowercase, non-alphanumerics as `_`.
pub fn category_slug(category: &str) -> String {
    category
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Instruction sent to the LLM for one context prompt.
pub fn drafting_instruction(category: &str) -> String {
    format!(
        "Write one realistic scene description for a product photograph. Name the setting, \
         nearby objects and the lighting. The product is a \"{category}\"."
    )
}

const MAX_DRAFT_ATTEMPTS: usize = 16;

/// Single-writer bank; readers see whole-file snapshots.
pub struct PromptBank {
    dir: PathBuf,
    writer: Mutex<()>,
}

impl PromptBank {
    pub fn open(dir: impl Into<PathBuf>) -> BankResult<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir, writer: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bank_path(&self, category: &str) -> PathBuf {
        self.dir.join(format!("{}.prompts", category_slug(category)))
    }

    pub fn audit_path(&self, category: &str) -> PathBuf {
        self.dir.join(format!("{}.audit", category_slug(category)))
    }

    fn read_file(path: &Path) -> BankResult<Vec<PromptBankEntry>> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| BankError::Malformed { path: path.to_path_buf(), line: i + 1, source })
            })
            .collect()
    }

    fn write_file(path: &Path, entries: &[PromptBankEntry]) -> BankResult<()> {
        let mut text = String::new();
        for e in entries {
            text.push_str(&to_canonical_string(e)?);
            text.push('\n');
        }
        let tmp = path.with_extension("prompts.tmp");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// All entries of `category` in file order.
    pub fn entries(&self, category: &str) -> BankResult<Vec<PromptBankEntry>> {
        Self::read_file(&self.bank_path(category))
    }

    pub fn pending(&self, category: &str) -> BankResult<Vec<PromptBankEntry>> {
        Ok(self.entries(category)?.into_iter().filter(|e| e.status == EntryStatus::Pending).collect())
    }

    /// Category names with a bank file, as recorded in their entries.
    pub fn categories(&self) -> BankResult<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let path = entry.map_err(io_err(&self.dir))?.path();
            if path.extension().is_some_and(|e| e == "prompts") {
                if let Some(first) = Self::read_file(&path)?.into_iter().next() {
                    out.push(first.category);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Drafts up to `n` pending entries for `category`. Entry ids derive from
    /// `(category, seed, index)`, so repeating a call adds nothing.
    pub fn populate(&self, category: &str, n: usize, llm: &dyn TextGenerator, seed: u64) -> BankResult<Vec<PromptBankEntry>> {
        let category = category.trim();
        if category.is_empty() {
            return Err(BankError::EmptyCategory);
        }
        let _guard = self.writer.lock().expect("bank writer lock");
        let path = self.bank_path(category);
        let mut entries = Self::read_file(&path)?;
        let mut created = Vec::new();
        let mut failure = None;
        for i in 0..n {
            let entry_id = derive_id("prompt", "bank", category, "populate", seed, i);
            if let Some(existing) = entries.iter().find(|e| e.entry_id == entry_id) {
                created.push(existing.clone());
                continue;
            }
            let instruction = drafting_instruction(category);
            let mut text = None;
            for attempt in 0..MAX_DRAFT_ATTEMPTS {
                match llm.complete(&instruction, derive_seed(seed, &format!("{category}/{i}/{attempt}"))) {
                    Ok(t) => {
                        let t = t.trim().to_string();
                        let duplicate = entries.iter().any(|e| e.category == category && e.prompt_text == t);
                        if !t.is_empty() && (!duplicate || attempt + 1 == MAX_DRAFT_ATTEMPTS) {
                            text = Some(t);
                            break;
                        }
                    }
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            let Some(prompt_text) = text else { break };
            let entry = PromptBankEntry {
                entry_id,
                category: category.to_string(),
                prompt_text,
                status: EntryStatus::Pending,
                usage_count: 0,
            };
            entries.push(entry.clone());
            created.push(entry);
        }
        Self::write_file(&path, &entries)?;
        match failure {
            Some(source) => Err(BankError::Partial {
                category: category.to_string(),
                persisted: created.len(),
                requested: n,
                source,
            }),
            None => Ok(created),
        }
    }

    fn find(&self, entry_id: &str) -> BankResult<(PathBuf, Vec<PromptBankEntry>, usize)> {
        for dirent in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let path = dirent.map_err(io_err(&self.dir))?.path();
            if path.extension().is_none_or(|e| e != "prompts") {
                continue;
            }
            let entries = Self::read_file(&path)?;
            if let Some(i) = entries.iter().position(|e| e.entry_id == entry_id) {
                return Ok((path, entries, i));
            }
        }
        Err(BankError::NotFound(entry_id.to_string()))
    }

    /// Records a review decision. Entries may be re-reviewed.
    pub fn curate(&self, entry_id: &str, decision: Decision, reviewer: &str) -> BankResult<PromptBankEntry> {
        let _guard = self.writer.lock().expect("bank writer lock");
        let (path, mut entries, i) = self.find(entry_id)?;
        let previous = entries[i].status;
        entries[i].status = decision.into();
        Self::write_file(&path, &entries)?;
        let line = AuditLine {
            entry_id: entry_id.to_string(),
            category: entries[i].category.clone(),
            previous,
            decision,
            reviewer: reviewer.to_string(),
            at: Utc::now(),
        };
        let audit = self.audit_path(&entries[i].category);
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&audit).map_err(io_err(&audit))?;
        writeln!(f, "{}", to_canonical_string(&line)?).map_err(io_err(&audit))?;
        Ok(entries[i].clone())
    }

    /// Approves every pending entry of `category`; returns how many changed.
    pub fn approve_all(&self, category: &str, reviewer: &str) -> BankResult<usize> {
        let pending = self.pending(category)?;
        for e in &pending {
            self.curate(&e.entry_id, Decision::Approved, reviewer)?;
        }
        Ok(pending.len())
    }

    pub fn audit_log(&self, category: &str) -> BankResult<Vec<AuditLine>> {
        let path = self.audit_path(category);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(text.lines().filter(|l| !l.is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?)
    }

    /// `k` approved prompts, without replacement when at least `k` exist and
    /// with replacement otherwise. Each serve bumps the entry's usage_count.
    pub fn get_prompts(&self, category: &str, k: usize, seed: u64) -> BankResult<Vec<String>> {
        let _guard = self.writer.lock().expect("bank writer lock");
        let path = self.bank_path(category);
        let mut entries = Self::read_file(&path)?;
        let mut approved: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].status == EntryStatus::Approved).collect();
        if approved.is_empty() {
            return Err(BankError::EmptyBank(category.to_string()));
        }
        approved.sort_by(|&a, &b| entries[a].entry_id.cmp(&entries[b].entry_id));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, category));
        let picks: Vec<usize> = if approved.len() >= k {
            for j in 0..k {
                let r = rng.gen_range(j..approved.len());
                approved.swap(j, r);
            }
            approved[..k].to_vec()
        } else {
            (0..k).map(|_| approved[rng.gen_range(0..approved.len())]).collect()
        };
        for &i in &picks {
            entries[i].usage_count += 1;
        }
        Self::write_file(&path, &entries)?;
        Ok(picks.into_iter().map(|i| entries[i].prompt_text.clone()).collect())
    }

    /// Total serves per entry id, for replay checks.
    pub fn usage(&self, category: &str) -> BankResult<BTreeMap<String, u64>> {
        Ok(self.entries(category)?.into_iter().map(|e| (e.entry_id, e.usage_count)).collect())
    }
}

/// Metadata `category` wins; otherwise the captioner names the product in `image`.
pub fn classify_category(product: &ProductRecord, captioner: &dyn Captioner, image: Option<&Raster>) -> BankResult<String> {
    if let Some(c) = product.metadata.get("category").map(|c| c.trim()).filter(|c| !c.is_empty()) {
        return Ok(c.to_string());
    }
    let fail = |reason: String| BankError::Classification { product_id: product.product_id.clone(), reason };
    let image = image.ok_or_else(|| fail("no metadata category and no image".into()))?;
    let caption = captioner.caption(image, CLASSIFY_INSTRUCTION).map_err(|e| fail(e.to_string()))?;
    let category = caption.text.trim().trim_end_matches('.').to_lowercase();
    if category.is_empty() {
        return Err(fail("captioner returned an empty category".into()));
    }
    Ok(category)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockCaptioner, MockLlm};
    use crate::backend::{BackendResult, Caption};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn bank() -> (tempfile::TempDir, PromptBank) {
        let dir = tempfile::tempdir().unwrap();
        let bank = PromptBank::open(dir.path().join("bank")).unwrap();
        (dir, bank)
    }

    #[test]
    fn populate_is_idempotent() {
        let (_d, bank) = bank();
        let a = bank.populate("chair", 5, &MockLlm, 7).unwrap();
        let b = bank.populate("chair", 5, &MockLlm, 7).unwrap();
        assert_eq!(a, b);
        let entries = bank.entries("chair").unwrap();
        assert_eq!(entries.len(), 5);
        assert!(entries.iter().all(|e| e.status == EntryStatus::Pending && e.category == "chair"));
        assert!(entries.iter().all(|e| e.prompt_text.contains("chair")));
        assert!(matches!(bank.populate(" ", 5, &MockLlm, 7), Err(BankError::EmptyCategory)));
    }

    #[test]
    fn drafts_are_distinct() {
        let (_d, bank) = bank();
        let entries = bank.populate("dining table", 50, &MockLlm, 1).unwrap();
        let mut texts: Vec<_> = entries.iter().map(|e| &e.prompt_text).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 50);
        assert!(bank.bank_path("dining table").ends_with("dining_table.prompts"));
    }

    struct FlakyLlm(AtomicUsize);

    impl TextGenerator for FlakyLlm {
        fn name(&self) -> &str {
            "flaky"
        }

        fn complete(&self, instruction: &str, seed: u64) -> BackendResult<String> {
            if self.0.fetch_add(1, Ordering::SeqCst) >= 3 {
                return Err(BackendError::Transport("connection reset".into()));
            }
            MockLlm.complete(instruction, seed)
        }
    }

    #[test]
    fn llm_failure_keeps_partial_results() {
        let (_d, bank) = bank();
        let err = bank.populate("lamp", 5, &FlakyLlm(AtomicUsize::new(0)), 3).unwrap_err();
        assert!(matches!(err, BankError::Partial { persisted: 3, requested: 5, .. }));
        assert_eq!(bank.entries("lamp").unwrap().len(), 3);
        // A retry fills the remainder without duplicating.
        bank.populate("lamp", 5, &MockLlm, 3).unwrap();
        assert_eq!(bank.entries("lamp").unwrap().len(), 5);
    }

    #[test]
    fn curation_and_serving() {
        let (_d, bank) = bank();
        let entries = bank.populate("chair", 4, &MockLlm, 2).unwrap();
        assert!(matches!(bank.get_prompts("chair", 1, 0), Err(BankError::EmptyBank(_))));
        let approved = bank.curate(&entries[0].entry_id, Decision::Approved, "ana").unwrap();
        assert_eq!(approved.status, EntryStatus::Approved);
        bank.curate(&entries[1].entry_id, Decision::Approved, "ana").unwrap();
        bank.curate(&entries[2].entry_id, Decision::Rejected, "ana").unwrap();
        assert!(matches!(bank.curate("prompt-nope", Decision::Approved, "ana"), Err(BankError::NotFound(_))));
        assert_eq!(bank.pending("chair").unwrap().len(), 1);

        let served = bank.get_prompts("chair", 5, 9).unwrap();
        assert_eq!(served.len(), 5);
        let allowed = [&entries[0].prompt_text, &entries[1].prompt_text];
        assert!(served.iter().all(|p| allowed.contains(&p)));
        assert_eq!(bank.usage("chair").unwrap().values().sum::<u64>(), 5);

        let audit = bank.audit_log("chair").unwrap();
        assert_eq!(audit.len(), 3);
        assert_eq!(audit[2].decision, Decision::Rejected);
        assert_eq!(audit[2].previous, EntryStatus::Pending);
    }

    #[test]
    fn serving_is_deterministic_and_without_replacement() {
        let (_d, bank) = bank();
        bank.populate("sofa", 10, &MockLlm, 4).unwrap();
        bank.approve_all("sofa", "auto").unwrap();
        let a = bank.get_prompts("sofa", 3, 11).unwrap();
        assert_eq!(a, bank.get_prompts("sofa", 3, 11).unwrap());
        let mut d = a.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 3);
        let usage = bank.usage("sofa").unwrap();
        assert_eq!(usage.values().sum::<u64>(), 6);
    }

    #[test]
    fn bank_file_round_trips() {
        let (_d, bank) = bank();
        bank.populate("desk", 6, &MockLlm, 5).unwrap();
        let path = bank.bank_path("desk");
        let before = fs::read_to_string(&path).unwrap();
        let entries = PromptBank::read_file(&path).unwrap();
        PromptBank::write_file(&path, &entries).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), before);
        assert_eq!(bank.categories().unwrap(), vec!["desk".to_string()]);
    }

    struct DownCaptioner;

    impl Captioner for DownCaptioner {
        fn name(&self) -> &str {
            "down"
        }

        fn caption_raw(&self, _: &Raster, _: &str) -> BackendResult<Caption> {
            Err(BackendError::Transport("unreachable".into()))
        }
    }

    fn product(metadata: &[(&str, &str)]) -> ProductRecord {
        ProductRecord {
            product_id: "p1".into(),
            title: "Acme Vortex".into(),
            category: "unknown".into(),
            metadata: metadata.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            base_asset_ids: vec!["b0".into()],
        }
    }

    #[test]
    fn metadata_category_takes_precedence() {
        let img = Raster::filled(8, 8, [1, 2, 3]);
        let p = product(&[("category", "dining table")]);
        assert_eq!(classify_category(&p, &DownCaptioner, Some(&img)).unwrap(), "dining table");
        let vlm = classify_category(&product(&[]), &MockCaptioner, Some(&img)).unwrap();
        assert!(!vlm.is_empty());
        assert!(matches!(
            classify_category(&product(&[]), &DownCaptioner, Some(&img)),
            Err(BankError::Classification { .. })
        ));
    }
}
