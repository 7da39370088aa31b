//! Rating protocol, task distribution and majority-vote verdicts.
//!
//! Every generated image is shown to three raters next to the product's base
//! photos. A rater passes an image only by answering "yes" to all eight
//! questions; the image passes when at least two of its three raters do.
//!
//! State lives in memory behind one mutex and is mirrored to an append-only
//! event log, replayed on open, so a restarted service resumes where it left
//! off.

pub mod http;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{derive_id, to_canonical_string};
use crate::model::{Answer, AssetRole, RatingRecord, QUESTION_COUNT};
use crate::prompt_bank::{BankError, PromptBank};
use crate::ranking::{per_image_pass_rate, per_product_pass_rate};
use crate::store::{AssetStore, StoreError};

/// Raters per image.
pub const PANEL_SIZE: usize = 3;

pub const PROTOCOL_VERSION: &str = "2024-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Question {
    pub id: &'static str,
    pub text: &'static str,
}

/// The form every rater sees. Order is part of the contract: answers are
/// positional.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Protocol {
    pub version: &'static str,
    pub scale: [Answer; 4],
    pub pass_answer: Answer,
    pub questions: [Question; QUESTION_COUNT],
}

pub const PROTOCOL: Protocol = Protocol {
    version: PROTOCOL_VERSION,
    scale: Answer::ALL,
    pass_answer: Answer::Yes,
    questions: [
        Question { id: "product_fidelity", text: "Is the product in the generated image the same product shown in the source photos?" },
        Question { id: "logo_fidelity", text: "Are logos, labels and printed text on the product reproduced correctly?" },
        Question { id: "realistic_use", text: "Is the product shown in a realistic setting or in a realistic way of using it?" },
        Question { id: "product_size", text: "Is the product a plausible size relative to its surroundings?" },
        Question { id: "no_hallucinations", text: "Is the image free of hallucinated objects or artifacts in the background and foreground?" },
        Question { id: "placement", text: "Is the product placed naturally, resting on or held by something that could support it?" },
        Question { id: "safety", text: "Is the image safe and appropriate to show to any customer?" },
        Question { id: "business_use", text: "If you owned this business, would you use this image to advertise the product?" },
    ],
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rater id must not be empty")]
    EmptyRater,
    #[error("reviewer must not be empty")]
    EmptyReviewer,
    #[error("raters_needed must be at least 1")]
    NoRaters,
    #[error("unknown assets: {}", .0.join(", "))]
    UnknownAssets(Vec<String>),
    #[error("assets already have rating tasks: {}", .0.join(", "))]
    AlreadyBatched(Vec<String>),
    #[error("task {0} not found")]
    TaskNotFound(String),
    #[error("task {task_id} is not assigned to rater {rater_id}")]
    NotAssigned { task_id: String, rater_id: String },
    #[error("expected {QUESTION_COUNT} answers, got {0}")]
    AnswerCount(usize),
    #[error("task {0} was already submitted")]
    AlreadySubmitted(String),
    #[error("asset {asset_id} has {ratings} ratings from distinct raters; a verdict needs exactly {PANEL_SIZE}")]
    IncompletePanel { asset_id: String, ratings: usize },
    #[error("panel mixes assets or repeats a rater")]
    InvalidPanel,
    #[error("no prompt bank is attached")]
    NoBank,
    #[error("malformed event log {path} line {line}: {source}")]
    MalformedLog { path: PathBuf, line: usize, source: serde_json::Error },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type EvalResult<T> = Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Assigned,
    Submitted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingTask {
    pub task_id: String,
    pub asset_id: String,
    pub source_asset_ids: Vec<String>,
    pub assigned_rater: Option<String>,
    pub status: TaskStatus,
}

/// True iff every answer is "yes".
pub fn rater_verdict(record: &RatingRecord) -> bool {
    record.answers.iter().all(|a| *a == Answer::Yes)
}

/// Majority of [`PANEL_SIZE`] distinct raters' verdicts on one asset.
pub fn image_verdict(records: &[RatingRecord]) -> EvalResult<bool> {
    if records.len() != PANEL_SIZE {
        return Err(EvalError::IncompletePanel {
            asset_id: records.first().map(|r| r.asset_id.clone()).unwrap_or_default(),
            ratings: records.len(),
        });
    }
    let raters: BTreeSet<&str> = records.iter().map(|r| r.rater_id.as_str()).collect();
    if raters.len() != PANEL_SIZE || records.iter().any(|r| r.asset_id != records[0].asset_id) {
        return Err(EvalError::InvalidPanel);
    }
    Ok(records.iter().filter(|r| rater_verdict(r)).count() * 2 > PANEL_SIZE)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerdictView {
    pub asset_id: String,
    pub ratings: usize,
    pub rater_verdicts: BTreeMap<String, bool>,
    /// `None` until the panel is complete.
    pub verdict: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassRateReport {
    pub images_judged: usize,
    pub images_pending: usize,
    pub products_judged: usize,
    pub per_image_pass_rate: f64,
    pub per_product_pass_rate: f64,
    /// Judged verdicts per product.
    pub verdicts: BTreeMap<String, Vec<bool>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Task { task: RatingTask },
    Assigned { task_id: String, rater_id: String },
    Rating { task_id: String, record: RatingRecord },
}

struct State {
    tasks: Vec<RatingTask>,
    by_id: HashMap<String, usize>,
    ratings: BTreeMap<String, Vec<RatingRecord>>,
    log: File,
}

impl State {
    fn apply(&mut self, event: Event) {
        match event {
            Event::Task { task } => {
                self.by_id.insert(task.task_id.clone(), self.tasks.len());
                self.tasks.push(task);
            }
            Event::Assigned { task_id, rater_id } => {
                if let Some(&i) = self.by_id.get(&task_id) {
                    self.tasks[i].assigned_rater = Some(rater_id);
                    self.tasks[i].status = TaskStatus::Assigned;
                }
            }
            Event::Rating { task_id, record } => {
                if let Some(&i) = self.by_id.get(&task_id) {
                    self.tasks[i].status = TaskStatus::Submitted;
                }
                self.ratings.entry(record.asset_id.clone()).or_default().push(record);
            }
        }
    }
}

pub struct EvalService {
    store: AssetStore,
    bank: Option<PromptBank>,
    log_path: PathBuf,
    state: Mutex<State>,
}

impl EvalService {
    /// Opens or resumes the service whose log lives at `eval_dir/ratings.log`.
    pub fn open(store: AssetStore, bank: Option<PromptBank>, eval_dir: &Path) -> EvalResult<Self> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(eval_dir).map_err(io(eval_dir))?;
        let log_path = eval_dir.join("ratings.log");
        let existing = if log_path.exists() { fs::read_to_string(&log_path).map_err(io(&log_path))? } else { String::new() };
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io(&log_path))?;
        let mut state = State { tasks: Vec::new(), by_id: HashMap::new(), ratings: BTreeMap::new(), log };
        for (n, line) in existing.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let event = serde_json::from_str(line)
                .map_err(|source| EvalError::MalformedLog { path: log_path.clone(), line: n + 1, source })?;
            state.apply(event);
        }
        Ok(Self { store, bank, log_path, state: Mutex::new(state) })
    }

    pub fn store(&self) -> &AssetStore {
        &self.store
    }

    pub fn bank(&self) -> EvalResult<&PromptBank> {
        self.bank.as_ref().ok_or(EvalError::NoBank)
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("eval state lock")
    }

    fn record(&self, state: &mut State, event: Event) -> EvalResult<()> {
        writeln!(state.log, "{}", to_canonical_string(&event)?)
            .map_err(|source| EvalError::Io { path: self.log_path.clone(), source })?;
        state.apply(event);
        Ok(())
    }

    /// Opens `raters_needed` tasks per asset. Each asset may be batched once.
    pub fn create_batch(&self, asset_ids: &[String], raters_needed: usize) -> EvalResult<Vec<RatingTask>> {
        if raters_needed == 0 {
            return Err(EvalError::NoRaters);
        }
        let unknown: Vec<String> = asset_ids.iter().filter(|id| !self.store.contains(id)).cloned().collect();
        if !unknown.is_empty() {
            return Err(EvalError::UnknownAssets(unknown));
        }
        let mut sources = Vec::with_capacity(asset_ids.len());
        for id in asset_ids {
            let asset = self.store.load_asset(id)?;
            sources.push(self.store.asset_ids(&asset.product_id, Some(AssetRole::Base)));
        }
        let mut state = self.lock();
        let batched = self.batched(&state);
        let mut seen = BTreeSet::new();
        let dup: Vec<String> = asset_ids.iter().filter(|id| batched.contains(id.as_str()) || !seen.insert(id.as_str())).cloned().collect();
        if !dup.is_empty() {
            return Err(EvalError::AlreadyBatched(dup));
        }
        let mut created = Vec::with_capacity(asset_ids.len() * raters_needed);
        for (id, source_asset_ids) in asset_ids.iter().zip(sources) {
            for slot in 0..raters_needed {
                let task = RatingTask {
                    task_id: derive_id("task", "eval", id, "rating", 0, slot),
                    asset_id: id.clone(),
                    source_asset_ids: source_asset_ids.clone(),
                    assigned_rater: None,
                    status: TaskStatus::Open,
                };
                created.push(task.clone());
                self.record(&mut state, Event::Task { task })?;
            }
        }
        Ok(created)
    }

    fn batched<'s>(&self, state: &'s State) -> BTreeSet<&'s str> {
        state.tasks.iter().map(|t| t.asset_id.as_str()).collect()
    }

    pub fn batched_assets(&self) -> BTreeSet<String> {
        self.batched(&self.lock()).into_iter().map(str::to_string).collect()
    }

    /// A rater's unsubmitted assignment if any, else the oldest open task on an
    /// asset the rater has not touched. `None` when nothing is left.
    pub fn fetch_next_task(&self, rater_id: &str) -> EvalResult<Option<RatingTask>> {
        if rater_id.trim().is_empty() {
            return Err(EvalError::EmptyRater);
        }
        let mut state = self.lock();
        let mine = |t: &RatingTask| t.assigned_rater.as_deref() == Some(rater_id);
        if let Some(t) = state.tasks.iter().find(|t| mine(t) && t.status == TaskStatus::Assigned) {
            return Ok(Some(t.clone()));
        }
        let touched: BTreeSet<&str> = state.tasks.iter().filter(|t| mine(t)).map(|t| t.asset_id.as_str()).collect();
        let Some(i) = state.tasks.iter().position(|t| t.status == TaskStatus::Open && !touched.contains(t.asset_id.as_str())) else {
            return Ok(None);
        };
        let task_id = state.tasks[i].task_id.clone();
        self.record(&mut state, Event::Assigned { task_id, rater_id: rater_id.to_string() })?;
        Ok(Some(state.tasks[i].clone()))
    }

    pub fn submit_rating(&self, task_id: &str, rater_id: &str, answers: &[Answer]) -> EvalResult<RatingRecord> {
        let mut state = self.lock();
        let i = *state.by_id.get(task_id).ok_or_else(|| EvalError::TaskNotFound(task_id.to_string()))?;
        let task = &state.tasks[i];
        if task.status == TaskStatus::Submitted {
            return Err(EvalError::AlreadySubmitted(task_id.to_string()));
        }
        if task.assigned_rater.as_deref() != Some(rater_id) {
            return Err(EvalError::NotAssigned { task_id: task_id.to_string(), rater_id: rater_id.to_string() });
        }
        let answers: [Answer; QUESTION_COUNT] = answers.try_into().map_err(|_| EvalError::AnswerCount(answers.len()))?;
        let record = RatingRecord {
            rating_id: derive_id("rating", "eval", &task.asset_id, rater_id, 0, 0),
            asset_id: task.asset_id.clone(),
            rater_id: rater_id.to_string(),
            answers,
            submitted_at: Utc::now(),
        };
        self.record(&mut state, Event::Rating { task_id: task_id.to_string(), record: record.clone() })?;
        Ok(record)
    }

    pub fn tasks(&self) -> Vec<RatingTask> {
        self.lock().tasks.clone()
    }

    pub fn ratings(&self, asset_id: &str) -> Vec<RatingRecord> {
        self.lock().ratings.get(asset_id).cloned().unwrap_or_default()
    }

    pub fn verdict(&self, asset_id: &str) -> EvalResult<VerdictView> {
        if !self.store.contains(asset_id) {
            return Err(EvalError::UnknownAssets(vec![asset_id.to_string()]));
        }
        let records = self.ratings(asset_id);
        let verdict = match image_verdict(&records) {
            Ok(v) => Some(v),
            Err(EvalError::IncompletePanel { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(VerdictView {
            asset_id: asset_id.to_string(),
            ratings: records.len(),
            rater_verdicts: records.iter().map(|r| (r.rater_id.clone(), rater_verdict(r))).collect(),
            verdict,
        })
    }

    /// Pass rates over every batched asset with a complete panel.
    pub fn report(&self) -> EvalResult<PassRateReport> {
        let (assets, ratings) = {
            let state = self.lock();
            (self.batched(&state).into_iter().map(str::to_string).collect::<Vec<_>>(), state.ratings.clone())
        };
        let mut verdicts: BTreeMap<String, Vec<bool>> = BTreeMap::new();
        let mut pending = 0;
        for id in assets {
            match image_verdict(ratings.get(&id).map(Vec::as_slice).unwrap_or_default()) {
                Ok(v) => verdicts.entry(self.store.load_asset(&id)?.product_id).or_default().push(v),
                Err(EvalError::IncompletePanel { .. }) => pending += 1,
                Err(e) => return Err(e),
            }
        }
        let flat: Vec<bool> = verdicts.values().flatten().copied().collect();
        Ok(PassRateReport {
            images_judged: flat.len(),
            images_pending: pending,
            products_judged: verdicts.len(),
            per_image_pass_rate: per_image_pass_rate(&flat),
            per_product_pass_rate: per_product_pass_rate(&verdicts),
            verdicts,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{ImageAsset, ProductRecord};
    use crate::raster::Raster;
    use std::sync::Arc;

    pub(crate) fn fixture(dir: &Path, generated: usize) -> (EvalService, Vec<String>) {
        let store = AssetStore::open(dir.join("store")).unwrap();
        store
            .store_product(&ProductRecord {
                product_id: "p1".into(),
                title: "Lamp".into(),
                category: "lamp".into(),
                metadata: BTreeMap::new(),
                base_asset_ids: vec!["b0".into()],
            })
            .unwrap();
        store.store_asset(&ImageAsset::new("b0", "p1", AssetRole::Base, 4, 4), &Raster::filled(4, 4, [1, 2, 3])).unwrap();
        let ids: Vec<String> = (0..generated).map(|i| format!("g{i}")).collect();
        for id in &ids {
            let a = ImageAsset::new(id, "p1", AssetRole::Generated, 4, 4).with_prompt("a lamp");
            store.store_asset(&a, &Raster::filled(4, 4, [9, 9, 9])).unwrap();
        }
        let bank = PromptBank::open(dir.join("bank")).unwrap();
        (EvalService::open(store, Some(bank), &dir.join("eval")).unwrap(), ids)
    }

    fn record(rater: &str, answers: [Answer; 8]) -> RatingRecord {
        RatingRecord { rating_id: rater.into(), asset_id: "a".into(), rater_id: rater.into(), answers, submitted_at: Utc::now() }
    }

    const YES: [Answer; 8] = [Answer::Yes; 8];

    #[test]
    fn verdict_examples() {
        assert!(rater_verdict(&record("r", YES)));
        let mut one_maybe = YES;
        one_maybe[7] = Answer::Maybe;
        assert!(!rater_verdict(&record("r", one_maybe)));
        assert!(!rater_verdict(&record("r", [Answer::Unclear; 8])));

        let panel = |v: [bool; 3]| -> Vec<RatingRecord> {
            v.iter().enumerate().map(|(i, p)| record(&format!("r{i}"), if *p { YES } else { one_maybe })).collect()
        };
        assert!(image_verdict(&panel([true, true, false])).unwrap());
        assert!(!image_verdict(&panel([true, false, false])).unwrap());
        assert!(matches!(image_verdict(&panel([true, true, true])[..2]), Err(EvalError::IncompletePanel { ratings: 2, .. })));
        let mut repeated = panel([true, true, true]);
        repeated[2].rater_id = "r0".into();
        assert!(matches!(image_verdict(&repeated), Err(EvalError::InvalidPanel)));
    }

    #[test]
    fn batch_sizes_and_unknown_assets() {
        let dir = tempfile::tempdir().unwrap();
        let (svc, ids) = fixture(dir.path(), 5);
        let tasks = svc.create_batch(&ids, 3).unwrap();
        assert_eq!(tasks.len(), 15);
        assert!(tasks.iter().all(|t| t.status == TaskStatus::Open && t.source_asset_ids == ["b0"]));
        assert!(matches!(svc.create_batch(&ids[..1], 3), Err(EvalError::AlreadyBatched(_))));
        match svc.create_batch(&["zz".to_string(), "yy".to_string()], 1) {
            Err(EvalError::UnknownAssets(u)) => assert_eq!(u, ["zz", "yy"]),
            other => panic!("unexpected {other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let (svc, ids) = fixture(dir.path(), 5);
        assert_eq!(svc.create_batch(&ids, 1).unwrap().len(), 5);
        assert!(matches!(svc.create_batch(&ids, 0), Err(EvalError::NoRaters)));
    }

    #[test]
    fn rating_flow() {
        let dir = tempfile::tempdir().unwrap();
        let (svc, ids) = fixture(dir.path(), 2);
        svc.create_batch(&ids, 3).unwrap();
        let t = svc.fetch_next_task("alice").unwrap().unwrap();
        assert_eq!(t.status, TaskStatus::Assigned);
        assert_eq!(svc.fetch_next_task("alice").unwrap().unwrap().task_id, t.task_id);
        assert!(matches!(svc.submit_rating(&t.task_id, "alice", &YES[..7]), Err(EvalError::AnswerCount(7))));
        assert!(matches!(svc.submit_rating(&t.task_id, "alice", &[Answer::Yes; 9]), Err(EvalError::AnswerCount(9))));
        assert!(matches!(svc.submit_rating(&t.task_id, "bob", &YES), Err(EvalError::NotAssigned { .. })));
        svc.submit_rating(&t.task_id, "alice", &YES).unwrap();
        assert!(matches!(svc.submit_rating(&t.task_id, "alice", &YES), Err(EvalError::AlreadySubmitted(_))));

        let second = svc.fetch_next_task("alice").unwrap().unwrap();
        assert_ne!(second.asset_id, t.asset_id);
        svc.submit_rating(&second.task_id, "alice", &YES).unwrap();
        assert!(svc.fetch_next_task("alice").unwrap().is_none());
        assert!(matches!(svc.fetch_next_task(" "), Err(EvalError::EmptyRater)));
    }

    #[test]
    fn verdicts_and_report_after_replay() {
        let dir = tempfile::tempdir().unwrap();
        let (svc, ids) = fixture(dir.path(), 2);
        svc.create_batch(&ids, 3).unwrap();
        let mut no = YES;
        no[0] = Answer::No;
        for (rater, answers) in [("a", YES), ("b", YES), ("c", no)] {
            let t = svc.fetch_next_task(rater).unwrap().unwrap();
            assert_eq!(t.asset_id, "g0");
            svc.submit_rating(&t.task_id, rater, &answers).unwrap();
        }
        let v = svc.verdict("g0").unwrap();
        assert_eq!(v.verdict, Some(true));
        assert!(!v.rater_verdicts["c"]);
        assert_eq!(svc.verdict("g1").unwrap().verdict, None);
        drop(svc);

        let (svc, _) = {
            let store = AssetStore::open(dir.path().join("store")).unwrap();
            (EvalService::open(store, None, &dir.path().join("eval")).unwrap(), ())
        };
        let report = svc.report().unwrap();
        assert_eq!((report.images_judged, report.images_pending, report.products_judged), (1, 1, 1));
        assert_eq!(report.per_image_pass_rate, 1.0);
        assert!(svc.fetch_next_task("a").unwrap().unwrap().asset_id == "g1");
        assert!(matches!(svc.bank(), Err(EvalError::NoBank)));
    }

    #[test]
    fn concurrent_fetches_never_double_assign() {
        for trial in 0..40 {
            let dir = tempfile::tempdir().unwrap();
            let (svc, ids) = fixture(dir.path(), 4);
            svc.create_batch(&ids, 3).unwrap();
            let svc = Arc::new(svc);
            let handles: Vec<_> = (0..6)
                .map(|r| {
                    let svc = Arc::clone(&svc);
                    std::thread::spawn(move || {
                        let rater = format!("r{r}-{trial}");
                        let mut got = Vec::new();
                        while let Some(t) = svc.fetch_next_task(&rater).unwrap() {
                            svc.submit_rating(&t.task_id, &rater, &YES).unwrap();
                            got.push(t);
                        }
                        got
                    })
                })
                .collect();
            let all: Vec<RatingTask> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
            assert_eq!(all.len(), 12);
            let unique: BTreeSet<_> = all.iter().map(|t| &t.task_id).collect();
            assert_eq!(unique.len(), 12);
            for id in &ids {
                let raters: BTreeSet<_> = svc.ratings(id).into_iter().map(|r| r.rater_id).collect();
                assert_eq!(raters.len(), PANEL_SIZE);
            }
        }
    }
}
