//! Service state over a data directory.
//!
//! | file | role |
//! |---|---|
//! | `server.toml` | tokens and curation settings (optional) |
//! | `queue.jsonl` | model outputs to register for review (input) |
//! | `audit.jsonl` | append-only curation log, replayed on start |
//! | `rating_export.jsonl` | blinded evaluator records (input) |
//! | `ratings.jsonl` | append-only submitted ratings |
//! | `test_ids.json` | held-out article ids, required for rebuilds |
//! | `bank/CURRENT` | file name of the live bank revision |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use exbank_core::ab::{AbError, AbRating, EvaluatorRecord, ScoreFields};
use exbank_core::bank::{ExemplarBank, ExemplarRecord};
use exbank_core::curation::{
    AdjudicationDecision, AdjudicationOutcome, AuditEntry, CorrectionDraft, CorrectionSpan, CurationError,
    CurationStore, ReviewItem, ReviewStatus, RubricFlags,
};
use exbank_core::embed::Embedder;
use exbank_core::prompt::Assessment;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Role, ServerConfig};
use crate::ServerError;

pub const CONFIG_FILE: &str = "server.toml";
pub const QUEUE_FILE: &str = "queue.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const EXPORT_FILE: &str = "rating_export.jsonl";
pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const TEST_IDS_FILE: &str = "test_ids.json";
pub const BANK_DIR: &str = "bank";
pub const CURRENT_FILE: &str = "CURRENT";

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Reads a line-delimited log, dropping (and truncating away) a torn final
/// line left by an interrupted write.
fn read_log<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServerError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServerError::Io(format!("{}: {e}", path.display()))),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!("{}: dropping torn final line", path.display());
        let file = OpenOptions::new().write(true).open(path).map_err(|e| ServerError::Io(e.to_string()))?;
        file.set_len(complete as u64).map_err(|e| ServerError::Io(e.to_string()))?;
    }
    let text = std::str::from_utf8(&bytes[..complete])
        .map_err(|e| ServerError::Corrupt(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ServerError::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn read_input<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServerError> {
    match std::fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| ServerError::Config(format!("{} line {}: {e}", path.display(), i + 1)))
            })
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(ServerError::Io(format!("{}: {e}", path.display()))),
    }
}

fn append_lines<T: Serialize>(file: &mut File, rows: &[T]) -> Result<(), ServerError> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("rows serialize");
        buf.push(b'\n');
    }
    file.write_all(&buf).and_then(|_| file.sync_data()).map_err(|e| ServerError::Io(e.to_string()))
}

fn open_append(path: &Path) -> Result<File, ServerError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ServerError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub id: String,
    pub role: Role,
}

impl Principal {
    pub fn is_expert(&self) -> bool {
        matches!(self.role, Role::Expert | Role::Admin)
    }
}

/// One model output to register for review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub item_id: String,
    pub article_id: String,
    pub language: String,
    pub article_text: String,
    pub assessment: Assessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub item_id: String,
    pub article_id: String,
    pub language: String,
    pub status: ReviewStatus,
    pub version: u64,
    pub reviews: usize,
}

/// A review item as shown to one expert. Until both first reviews are in,
/// other experts' corrections are withheld so reviews stay independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    #[serde(flatten)]
    pub item: ReviewItem,
    pub hidden_reviews: usize,
}

impl ItemView {
    fn of(item: &ReviewItem, viewer: &Principal) -> Self {
        let mut item = item.clone();
        let blind =
            matches!(item.status, ReviewStatus::Pending | ReviewStatus::ReviewedOnce) && viewer.role != Role::Admin;
        let before = item.reviews.len();
        if blind {
            item.reviews.retain(|r| r.expert_id == viewer.id);
        }
        let hidden_reviews = before - item.reviews.len();
        Self { item, hidden_reviews }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewRequest {
    pub expected_version: u64,
    pub severity: String,
    #[serde(default)]
    pub spans: Vec<CorrectionSpan>,
    #[serde(default)]
    pub rationale: String,
    pub rubric: RubricFlags,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjudicateRequest {
    pub expected_version: u64,
    pub outcome: AdjudicationOutcome,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebuildRequest {
    /// Admitted items to fold in; all admitted items when absent.
    #[serde(default)]
    pub item_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebuildOutcome {
    /// False when every selected admission was already in the live bank.
    pub created: bool,
    pub file: String,
    pub revision: u32,
    pub fingerprint: String,
    pub parent_fingerprint: Option<String>,
    pub size: usize,
    pub admitted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub item_id: String,
    pub article_text: String,
    pub rationale_left: String,
    pub rationale_right: String,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

/// Everything an evaluator sees: texts and anonymous sides, never the
/// conditions or models behind them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSession {
    pub evaluator_id: String,
    pub language: String,
    pub progress: Progress,
    pub items: Vec<SessionItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingSubmission {
    pub scores_left: ScoreFields,
    pub scores_right: ScoreFields,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingAck {
    pub item_id: String,
    pub complete: bool,
    pub progress: Progress,
}

/// A persisted rating line; readable as a plain [`AbRating`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRating {
    #[serde(flatten)]
    pub rating: AbRating,
    pub recorded_at: String,
}

struct Curation {
    store: CurationStore,
    audit: File,
    persisted: usize,
}

impl Curation {
    /// Appends log entries produced since the last commit.
    fn commit(&mut self) -> Result<(), ServerError> {
        let fresh: Vec<&AuditEntry> = self.store.log()[self.persisted..].iter().collect();
        append_lines(&mut self.audit, &fresh)?;
        self.persisted = self.store.log().len();
        Ok(())
    }
}

struct Ratings {
    sessions: BTreeMap<String, Vec<EvaluatorRecord>>,
    latest: BTreeMap<(String, String), StoredRating>,
    file: File,
}

impl Ratings {
    fn progress(&self, evaluator_id: &str) -> Progress {
        let records = self.sessions.get(evaluator_id).map_or(&[][..], Vec::as_slice);
        Progress {
            completed: records
                .iter()
                .filter(|r| self.latest.contains_key(&(evaluator_id.to_string(), r.item_id.clone())))
                .count(),
            total: records.len(),
        }
    }
}

#[derive(Clone)]
struct LiveBank {
    file: String,
    bank: Arc<ExemplarBank>,
}

pub struct AppState {
    dir: PathBuf,
    config: ServerConfig,
    curation: Mutex<Curation>,
    ratings: Mutex<Ratings>,
    bank: Mutex<Option<LiveBank>>,
    rebuild: Mutex<()>,
    embedder: Option<Arc<Embedder>>,
    test_ids: Option<BTreeSet<String>>,
}

impl AppState {
    /// Opens a data directory, replaying the audit and rating logs and
    /// registering any new entries of `queue.jsonl`. `embedder` must match
    /// the bank's provider for rebuilds to work.
    pub fn open(dir: &Path, embedder: Option<Arc<Embedder>>) -> Result<Arc<Self>, ServerError> {
        let config_path = dir.join(CONFIG_FILE);
        let config = if config_path.exists() { ServerConfig::load(&config_path)? } else { ServerConfig::default() };
        Self::open_with(dir, config, embedder)
    }

    pub fn open_with(
        dir: &Path,
        config: ServerConfig,
        embedder: Option<Arc<Embedder>>,
    ) -> Result<Arc<Self>, ServerError> {
        config.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| ServerError::Io(e.to_string()))?;

        let audit_path = dir.join(AUDIT_FILE);
        let log: Vec<AuditEntry> = read_log(&audit_path)?;
        let store = CurationStore::replay(config.curation(), &log)?;
        let mut curation = Curation { persisted: store.log().len(), store, audit: open_append(&audit_path)? };
        let mut created = 0;
        for q in read_input::<QueueItem>(&dir.join(QUEUE_FILE))? {
            if curation.store.get(&q.item_id).is_none() {
                curation.store.create_item(&q.item_id, &q.article_id, &q.language, &q.article_text, q.assessment)?;
                created += 1;
            }
        }
        curation.commit()?;
        log::info!("curation: {} items ({created} new), {} audit entries", curation.store.items().count(), log.len());

        let mut sessions: BTreeMap<String, Vec<EvaluatorRecord>> = BTreeMap::new();
        for r in read_input::<EvaluatorRecord>(&dir.join(EXPORT_FILE))? {
            let records = sessions.entry(r.evaluator_id.clone()).or_default();
            if records.iter().any(|x| x.item_id == r.item_id) {
                return Err(ServerError::Config(format!("{} lists item {} twice", r.evaluator_id, r.item_id)));
            }
            records.push(r);
        }
        let ratings_path = dir.join(RATINGS_FILE);
        let latest = read_log::<StoredRating>(&ratings_path)?
            .into_iter()
            .map(|s| ((s.rating.evaluator_id.clone(), s.rating.item_id.clone()), s))
            .collect();
        let ratings = Ratings { sessions, latest, file: open_append(&ratings_path)? };

        let test_path = dir.join(TEST_IDS_FILE);
        let test_ids = if test_path.exists() {
            let text = std::fs::read_to_string(&test_path).map_err(|e| ServerError::Io(e.to_string()))?;
            Some(serde_json::from_str(&text).map_err(|e| ServerError::Config(format!("{TEST_IDS_FILE}: {e}")))?)
        } else {
            None
        };

        let bank = read_current(&dir.join(BANK_DIR))?;
        if let (Some(live), Some(embedder)) = (&bank, &embedder) {
            live.bank.check_provider(embedder.provider_id())?;
        }

        Ok(Arc::new(Self {
            dir: dir.to_path_buf(),
            config,
            curation: Mutex::new(curation),
            ratings: Mutex::new(ratings),
            bank: Mutex::new(bank),
            rebuild: Mutex::new(()),
            embedder,
            test_ids,
        }))
    }

    pub fn authenticate(&self, token: &str) -> Option<Principal> {
        self.config.grant(token).map(|g| Principal { id: g.id.clone(), role: g.role })
    }

    pub fn queue(&self, language: Option<&str>) -> Vec<QueueEntry> {
        lock(&self.curation)
            .store
            .queue(language)
            .into_iter()
            .map(|i| QueueEntry {
                item_id: i.item_id.clone(),
                article_id: i.article_id.clone(),
                language: i.language.clone(),
                status: i.status,
                version: i.version,
                reviews: i.reviews.len(),
            })
            .collect()
    }

    pub fn item(&self, item_id: &str, viewer: &Principal) -> Result<ItemView, ServerError> {
        let curation = lock(&self.curation);
        let item = curation.store.get(item_id).ok_or_else(|| CurationError::UnknownItem(item_id.to_string()))?;
        Ok(ItemView::of(item, viewer))
    }

    pub fn review(&self, item_id: &str, viewer: &Principal, req: ReviewRequest) -> Result<ItemView, ServerError> {
        let draft = CorrectionDraft {
            expert_id: viewer.id.clone(),
            severity: req.severity,
            spans: req.spans,
            rationale: req.rationale,
            rubric: req.rubric,
        };
        let mut curation = lock(&self.curation);
        let view = ItemView::of(curation.store.submit_review(item_id, req.expected_version, draft, &now())?, viewer);
        curation.commit()?;
        Ok(view)
    }

    pub fn adjudicate(
        &self,
        item_id: &str,
        viewer: &Principal,
        req: AdjudicateRequest,
    ) -> Result<ItemView, ServerError> {
        let decision = AdjudicationDecision { adjudicator_id: viewer.id.clone(), outcome: req.outcome, note: req.note };
        let mut curation = lock(&self.curation);
        let view = ItemView::of(curation.store.adjudicate(item_id, req.expected_version, decision)?, viewer);
        curation.commit()?;
        Ok(view)
    }

    /// Audit entries so far, for inspection and tests.
    pub fn audit_log(&self) -> Vec<AuditEntry> {
        lock(&self.curation).store.log().to_vec()
    }

    pub fn store_snapshot(&self) -> CurationStore {
        lock(&self.curation).store.clone()
    }

    pub fn current_bank(&self) -> Option<(String, Arc<ExemplarBank>)> {
        lock(&self.bank).as_ref().map(|l| (l.file.clone(), l.bank.clone()))
    }

    /// Writes a new bank revision holding the selected admissions. Runs as an
    /// exclusive batch: a concurrent call gets [`ServerError::Busy`].
    pub fn rebuild_bank(&self, req: &RebuildRequest) -> Result<RebuildOutcome, ServerError> {
        let _exclusive = match self.rebuild.try_lock() {
            Ok(g) => g,
            Err(std::sync::TryLockError::WouldBlock) => {
                return Err(ServerError::Busy("a bank rebuild is running".into()))
            }
            Err(std::sync::TryLockError::Poisoned(e)) => e.into_inner(),
        };
        let live = lock(&self.bank).clone().ok_or_else(|| ServerError::Unavailable("no bank is installed".into()))?;
        let test_ids =
            self.test_ids.as_ref().ok_or_else(|| ServerError::Unavailable(format!("{TEST_IDS_FILE} is missing")))?;
        let embedder =
            self.embedder.as_ref().ok_or_else(|| ServerError::Unavailable("no embedding provider".into()))?;

        let admitted = self.select_admissions(req)?;
        let fresh: Vec<ExemplarRecord> =
            admitted.iter().filter(|r| live.bank.get(&r.article_id).is_none_or(|e| &e.record != *r)).cloned().collect();
        // refuse contamination even when nothing would change
        if let Some(r) = admitted.iter().find(|r| test_ids.contains(&r.article_id)) {
            return Err(exbank_core::bank::BankError::ContaminationAttempt(r.article_id.clone()).into());
        }
        let outcome = |created: bool, file: &str, bank: &ExemplarBank| RebuildOutcome {
            created,
            file: file.to_string(),
            revision: bank.revision(),
            fingerprint: bank.fingerprint().to_string(),
            parent_fingerprint: bank.parent_fingerprint().map(str::to_string),
            size: bank.len(),
            admitted: admitted.len(),
        };
        if fresh.is_empty() {
            return Ok(outcome(false, &live.file, &live.bank));
        }
        let next = live.bank.with_admissions(fresh, embedder, test_ids)?;
        let file = bank_file_name(&next);
        let bank_dir = self.dir.join(BANK_DIR);
        next.save(&bank_dir.join(&file))?;
        let pointer = bank_dir.join(format!("{CURRENT_FILE}.tmp"));
        std::fs::write(&pointer, format!("{file}\n"))
            .and_then(|_| std::fs::rename(&pointer, bank_dir.join(CURRENT_FILE)))
            .map_err(|e| ServerError::Io(e.to_string()))?;
        log::info!("bank revision {} written to {file}", next.revision());
        let result = outcome(true, &file, &next);
        *lock(&self.bank) = Some(LiveBank { file, bank: Arc::new(next) });
        Ok(result)
    }

    fn select_admissions(&self, req: &RebuildRequest) -> Result<Vec<ExemplarRecord>, ServerError> {
        let curation = lock(&self.curation);
        let store = &curation.store;
        match &req.item_ids {
            None => Ok(store.admissions()),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    let item = store.get(id).ok_or_else(|| CurationError::UnknownItem(id.clone()))?;
                    item.admission_record().ok_or_else(|| {
                        ServerError::Curation(CurationError::IllegalTransition {
                            status: item.status,
                            action: "bank admission".into(),
                        })
                    })
                })
                .collect(),
        }
    }

    pub fn rating_session(&self, evaluator_id: &str) -> Result<RatingSession, ServerError> {
        let ratings = lock(&self.ratings);
        let records = ratings
            .sessions
            .get(evaluator_id)
            .ok_or_else(|| ServerError::NotFound(format!("no assignment for {evaluator_id}")))?;
        Ok(RatingSession {
            evaluator_id: evaluator_id.to_string(),
            language: records.first().map(|r| r.language.clone()).unwrap_or_default(),
            progress: ratings.progress(evaluator_id),
            items: records
                .iter()
                .map(|r| SessionItem {
                    item_id: r.item_id.clone(),
                    article_text: r.article_text.clone(),
                    rationale_left: r.rationale_left.clone(),
                    rationale_right: r.rationale_right.clone(),
                    complete: ratings.latest.contains_key(&(evaluator_id.to_string(), r.item_id.clone())),
                })
                .collect(),
        })
    }

    /// Validates and appends a rating. A resubmission supersedes the earlier
    /// one; both stay in the log.
    pub fn record_rating(
        &self,
        evaluator_id: &str,
        item_id: &str,
        sub: RatingSubmission,
    ) -> Result<RatingAck, ServerError> {
        let mut ratings = lock(&self.ratings);
        let assigned =
            ratings.sessions.get(evaluator_id).is_some_and(|records| records.iter().any(|r| r.item_id == item_id));
        if !assigned {
            return Err(AbError::ItemNotInAssignment(item_id.to_string()).into());
        }
        let incomplete = || AbError::IncompleteItem(item_id.to_string());
        let rating = AbRating {
            evaluator_id: evaluator_id.to_string(),
            item_id: item_id.to_string(),
            left: sub.scores_left.complete().ok_or_else(incomplete)?,
            right: sub.scores_right.complete().ok_or_else(incomplete)?,
            comment: sub.comment.filter(|c| !c.trim().is_empty()),
        };
        rating.validate()?;
        let stored = StoredRating { rating, recorded_at: now() };
        append_lines(&mut ratings.file, std::slice::from_ref(&stored))?;
        ratings.latest.insert((evaluator_id.to_string(), item_id.to_string()), stored);
        Ok(RatingAck { item_id: item_id.to_string(), complete: true, progress: ratings.progress(evaluator_id) })
    }
}

fn bank_file_name(bank: &ExemplarBank) -> String {
    format!("rev-{:04}-{}.bank", bank.revision(), &bank.fingerprint()[..12])
}

fn read_current(bank_dir: &Path) -> Result<Option<LiveBank>, ServerError> {
    let pointer = bank_dir.join(CURRENT_FILE);
    let file = match std::fs::read_to_string(&pointer) {
        Ok(s) => s.trim().to_string(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(ServerError::Io(e.to_string())),
    };
    if file.is_empty() || file.contains(['/', '\\']) {
        return Err(ServerError::Corrupt(format!("{CURRENT_FILE} names {file:?}")));
    }
    let bank = ExemplarBank::load(&bank_dir.join(&file))?;
    Ok(Some(LiveBank { file, bank: Arc::new(bank) }))
}

/// Installs `bank` as the live revision of a data directory.
pub fn install_bank(dir: &Path, bank: &ExemplarBank) -> Result<String, ServerError> {
    let bank_dir = dir.join(BANK_DIR);
    std::fs::create_dir_all(&bank_dir).map_err(|e| ServerError::Io(e.to_string()))?;
    let file = bank_file_name(bank);
    bank.save(&bank_dir.join(&file))?;
    std::fs::write(bank_dir.join(CURRENT_FILE), format!("{file}\n")).map_err(|e| ServerError::Io(e.to_string()))?;
    Ok(file)
}
