//! Expert review state machine for model outputs headed into the bank.
//!
//! ```text
//! pending --review--> reviewed_once --concordant review--> admitted
//!                          |
//!                          +--discordant review--> in_discussion
//!                                                   |  both reviewers resubmit
//!                                                   +--concordant--> admitted
//!                                                   +--otherwise---> adjudication
//! adjudication --third expert--> admitted | excluded
//! ```
//!
//! Every accepted call bumps the item version and appends an audit entry;
//! replaying the audit log rebuilds the store exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::ExemplarRecord;
use crate::corpus::{ArticleLabel, SpanAnnotation, NONE_LABEL};
use crate::metrics::span_f1;
use crate::prompt::Assessment;
use crate::text::{char_slice, nfc};

pub const DEFAULT_CONCORDANCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CurationError {
    #[error("item {item_id} is at version {actual}, request was for {expected}")]
    VersionConflict { item_id: String, expected: u64, actual: u64 },
    #[error("{action} is not allowed while the item is {status}")]
    IllegalTransition { status: ReviewStatus, action: String },
    #[error("expert {0} reviewed this item and cannot adjudicate it")]
    SelfAdjudication(String),
    #[error("invalid correction: {0}")]
    InvalidCorrection(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("item {0} already exists")]
    DuplicateItem(String),
    #[error("audit log is inconsistent at entry {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    ReviewedOnce,
    InDiscussion,
    Adjudication,
    Admitted,
    Excluded,
}

impl std::fmt::Display for ReviewStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Pending => "pending",
            Self::ReviewedOnce => "reviewed_once",
            Self::InDiscussion => "in_discussion",
            Self::Adjudication => "adjudication",
            Self::Admitted => "admitted",
            Self::Excluded => "excluded",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricFlags {
    pub grounded_in_text: Option<bool>,
    pub locally_salient_framing: Option<bool>,
    pub non_generic: Option<bool>,
}

impl RubricFlags {
    pub fn answered(&self) -> bool {
        self.grounded_in_text.is_some() && self.locally_salient_framing.is_some() && self.non_generic.is_some()
    }
}

/// A character range of the NFC article text with its surface string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Body of a review as submitted by an expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionDraft {
    pub expert_id: String,
    /// A severity from the vocabulary, or `None` for an unproblematic item.
    pub severity: String,
    #[serde(default)]
    pub spans: Vec<CorrectionSpan>,
    #[serde(default)]
    pub rationale: String,
    pub rubric: RubricFlags,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertCorrection {
    pub correction_id: String,
    pub expert_id: String,
    pub severity: String,
    pub spans: Vec<CorrectionSpan>,
    pub rationale: String,
    pub rubric: RubricFlags,
    pub timestamp: String,
    /// Submitted while the item was in discussion.
    #[serde(default)]
    pub in_discussion: bool,
}

impl ExpertCorrection {
    pub fn span_texts(&self) -> Vec<&str> {
        self.spans.iter().map(|s| s.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdjudicationOutcome {
    AdmitWith { correction_id: String },
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationDecision {
    pub adjudicator_id: String,
    pub outcome: AdjudicationOutcome,
    #[serde(default)]
    pub note: String,
}

/// Why an item reached `admitted`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdmissionBasis {
    Concordant { corrections: [String; 2] },
    Adjudicated { adjudicator_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub article_id: String,
    pub language: String,
    pub article_text: String,
    pub assessment: Assessment,
    pub status: ReviewStatus,
    pub reviews: Vec<ExpertCorrection>,
    #[serde(default)]
    pub adjudication: Option<AdjudicationDecision>,
    #[serde(default)]
    pub admitted_correction: Option<String>,
    #[serde(default)]
    pub admission_basis: Option<AdmissionBasis>,
    pub version: u64,
}

impl ReviewItem {
    pub fn reviewers(&self) -> BTreeSet<&str> {
        self.reviews.iter().map(|r| r.expert_id.as_str()).collect()
    }

    fn first_reviewers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.reviews {
            if !out.contains(&r.expert_id.as_str()) {
                out.push(&r.expert_id);
            }
        }
        out
    }

    fn correction(&self, id: &str) -> Option<&ExpertCorrection> {
        self.reviews.iter().find(|r| r.correction_id == id)
    }

    /// The bank record for an admitted item.
    pub fn admission_record(&self) -> Option<ExemplarRecord> {
        if self.status != ReviewStatus::Admitted {
            return None;
        }
        let c = self.correction(self.admitted_correction.as_deref()?)?;
        let none = c.severity == NONE_LABEL;
        let mut metadata = BTreeMap::new();
        metadata.insert("curation_item".to_string(), self.item_id.clone());
        metadata.insert("curation_correction".to_string(), c.correction_id.clone());
        Some(ExemplarRecord {
            article_id: self.article_id.clone(),
            language: self.language.clone(),
            text: self.article_text.clone(),
            label: if none { ArticleLabel::None } else { ArticleLabel::Problematic },
            severity: (!none).then(|| c.severity.clone()),
            spans: if none {
                Vec::new()
            } else {
                c.spans.iter().map(|s| SpanAnnotation { text: s.text.clone(), range: Some([s.start, s.end]) }).collect()
            },
            rationale: if none { String::new() } else { c.rationale.clone() },
            metadata,
        })
    }
}

/// Concordance rule: identical severity and span F1 at or above `threshold`.
pub fn concordant(a: &ExpertCorrection, b: &ExpertCorrection, threshold: f64) -> bool {
    a.severity == b.severity && span_f1(&a.span_texts(), &b.span_texts()) >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub concordance_threshold: f64,
    /// Allowed severities besides `None`; empty accepts any non-blank label.
    pub severity_vocabulary: Vec<String>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { concordance_threshold: DEFAULT_CONCORDANCE_THRESHOLD, severity_vocabulary: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Created { item: Box<ReviewItem> },
    Reviewed { correction: ExpertCorrection },
    Adjudicated { decision: AdjudicationDecision },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub item_id: String,
    /// Version the request was made against.
    pub expected_version: u64,
    pub from: Option<ReviewStatus>,
    pub to: ReviewStatus,
    #[serde(flatten)]
    pub event: AuditEvent,
}

/// In-memory review items plus their append-only audit log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurationStore {
    config: CurationConfig,
    items: BTreeMap<String, ReviewItem>,
    log: Vec<AuditEntry>,
}

fn validate_draft(draft: &CorrectionDraft, article_text: &str, config: &CurationConfig) -> Result<(), CurationError> {
    let bad = |m: String| Err(CurationError::InvalidCorrection(m));
    if draft.expert_id.trim().is_empty() {
        return bad("expert id is empty".into());
    }
    if !draft.rubric.answered() {
        return bad("every rubric flag must be answered".into());
    }
    let severity = draft.severity.trim();
    if severity != draft.severity || severity.is_empty() {
        return bad(format!("severity {:?} is blank or padded", draft.severity));
    }
    if severity == NONE_LABEL {
        if !draft.spans.is_empty() || !draft.rationale.trim().is_empty() {
            return bad("a None correction carries no spans and no rationale".into());
        }
        return Ok(());
    }
    if !config.severity_vocabulary.is_empty() && !config.severity_vocabulary.iter().any(|v| v == severity) {
        return bad(format!("severity {severity:?} is outside the vocabulary"));
    }
    if draft.spans.is_empty() {
        return bad("a problematic correction needs at least one span".into());
    }
    if draft.rationale.trim().is_empty() {
        return bad("a problematic correction needs a rationale".into());
    }
    for (i, s) in draft.spans.iter().enumerate() {
        match char_slice(article_text, s.start, s.end) {
            Some(slice) if slice == nfc(&s.text) => {}
            Some(slice) => return bad(format!("span {i} reads {slice:?}, not {:?}", s.text)),
            None => return bad(format!("span {i} range [{}, {}) is outside the text", s.start, s.end)),
        }
    }
    Ok(())
}

impl CurationStore {
    pub fn new(config: CurationConfig) -> Self {
        Self { config, items: BTreeMap::new(), log: Vec::new() }
    }

    pub fn config(&self) -> &CurationConfig {
        &self.config
    }

    pub fn get(&self, item_id: &str) -> Option<&ReviewItem> {
        self.items.get(item_id)
    }

    pub fn items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values()
    }

    pub fn log(&self) -> &[AuditEntry] {
        &self.log
    }

    /// Items awaiting an expert, optionally restricted to one language.
    pub fn queue(&self, language: Option<&str>) -> Vec<&ReviewItem> {
        self.items
            .values()
            .filter(|i| language.is_none_or(|l| i.language == l))
            .filter(|i| !matches!(i.status, ReviewStatus::Admitted | ReviewStatus::Excluded))
            .collect()
    }

    /// Bank records of every admitted item, in item order.
    pub fn admissions(&self) -> Vec<ExemplarRecord> {
        self.items.values().filter_map(ReviewItem::admission_record).collect()
    }

    fn push(
        &mut self,
        item_id: &str,
        expected_version: u64,
        from: Option<ReviewStatus>,
        to: ReviewStatus,
        event: AuditEvent,
    ) -> &AuditEntry {
        let seq = self.log.len() as u64 + 1;
        self.log.push(AuditEntry { seq, item_id: item_id.to_string(), expected_version, from, to, event });
        self.log.last().expect("just pushed")
    }

    /// Registers a model output for review.
    pub fn create_item(
        &mut self,
        item_id: &str,
        article_id: &str,
        language: &str,
        article_text: &str,
        assessment: Assessment,
    ) -> Result<&ReviewItem, CurationError> {
        if self.items.contains_key(item_id) {
            return Err(CurationError::DuplicateItem(item_id.to_string()));
        }
        let item = ReviewItem {
            item_id: item_id.to_string(),
            article_id: article_id.to_string(),
            language: language.to_string(),
            article_text: nfc(article_text),
            assessment,
            status: ReviewStatus::Pending,
            reviews: Vec::new(),
            adjudication: None,
            admitted_correction: None,
            admission_basis: None,
            version: 0,
        };
        self.push(item_id, 0, None, ReviewStatus::Pending, AuditEvent::Created { item: Box::new(item.clone()) });
        self.items.insert(item_id.to_string(), item);
        Ok(&self.items[item_id])
    }

    fn checked(&self, item_id: &str, expected_version: u64) -> Result<&ReviewItem, CurationError> {
        let item = self.items.get(item_id).ok_or_else(|| CurationError::UnknownItem(item_id.to_string()))?;
        if item.version != expected_version {
            return Err(CurationError::VersionConflict {
                item_id: item_id.to_string(),
                expected: expected_version,
                actual: item.version,
            });
        }
        Ok(item)
    }

    /// Records an expert review and applies the resulting transition.
    pub fn submit_review(
        &mut self,
        item_id: &str,
        expected_version: u64,
        draft: CorrectionDraft,
        timestamp: &str,
    ) -> Result<&ReviewItem, CurationError> {
        let item = self.checked(item_id, expected_version)?;
        validate_draft(&draft, &item.article_text, &self.config)?;
        let illegal = |why: &str| CurationError::IllegalTransition { status: item.status, action: why.to_string() };
        let reviewers = item.first_reviewers();
        match item.status {
            ReviewStatus::Pending => {}
            ReviewStatus::ReviewedOnce if reviewers.contains(&draft.expert_id.as_str()) => {
                return Err(illegal("a second review by the same expert"));
            }
            ReviewStatus::ReviewedOnce => {}
            ReviewStatus::InDiscussion if !reviewers.contains(&draft.expert_id.as_str()) => {
                return Err(illegal("a review by an expert outside the discussion"));
            }
            ReviewStatus::InDiscussion => {}
            ReviewStatus::Adjudication | ReviewStatus::Admitted | ReviewStatus::Excluded => {
                return Err(illegal("review"));
            }
        }
        let correction = ExpertCorrection {
            correction_id: format!("{item_id}#{}", item.reviews.len() + 1),
            expert_id: draft.expert_id,
            severity: draft.severity,
            spans: draft.spans,
            rationale: draft.rationale,
            rubric: draft.rubric,
            timestamp: timestamp.to_string(),
            in_discussion: item.status == ReviewStatus::InDiscussion,
        };
        let (from, to) = self.apply_review(item_id, correction.clone());
        self.push(item_id, expected_version, Some(from), to, AuditEvent::Reviewed { correction });
        Ok(&self.items[item_id])
    }

    fn apply_review(&mut self, item_id: &str, correction: ExpertCorrection) -> (ReviewStatus, ReviewStatus) {
        let threshold = self.config.concordance_threshold;
        let item = self.items.get_mut(item_id).expect("checked");
        let from = item.status;
        item.reviews.push(correction);
        item.version += 1;
        let pick = |a: &ExpertCorrection, b: &ExpertCorrection| {
            // the fuller rationale wins, the earlier correction on ties
            if b.rationale.chars().count() > a.rationale.chars().count() {
                b.clone()
            } else {
                a.clone()
            }
        };
        match from {
            ReviewStatus::Pending => item.status = ReviewStatus::ReviewedOnce,
            ReviewStatus::ReviewedOnce => {
                let (a, b) = (&item.reviews[0], &item.reviews[1]);
                if concordant(a, b, threshold) {
                    let chosen = pick(a, b);
                    item.admission_basis = Some(AdmissionBasis::Concordant {
                        corrections: [a.correction_id.clone(), b.correction_id.clone()],
                    });
                    item.admitted_correction = Some(chosen.correction_id);
                    item.status = ReviewStatus::Admitted;
                } else {
                    item.status = ReviewStatus::InDiscussion;
                }
            }
            ReviewStatus::InDiscussion => {
                let reviewers = item.first_reviewers();
                let latest: Vec<&ExpertCorrection> = reviewers
                    .iter()
                    .filter_map(|e| item.reviews.iter().rev().find(|r| r.in_discussion && r.expert_id == *e))
                    .collect();
                if latest.len() == 2 {
                    let (a, b) = (latest[0], latest[1]);
                    if concordant(a, b, threshold) {
                        let chosen = pick(a, b);
                        item.admission_basis = Some(AdmissionBasis::Concordant {
                            corrections: [a.correction_id.clone(), b.correction_id.clone()],
                        });
                        item.admitted_correction = Some(chosen.correction_id);
                        item.status = ReviewStatus::Admitted;
                    } else {
                        item.status = ReviewStatus::Adjudication;
                    }
                }
            }
            _ => unreachable!("rejected before apply"),
        }
        (from, item.status)
    }

    /// Records a third expert's decision on an item in adjudication.
    pub fn adjudicate(
        &mut self,
        item_id: &str,
        expected_version: u64,
        decision: AdjudicationDecision,
    ) -> Result<&ReviewItem, CurationError> {
        let item = self.checked(item_id, expected_version)?;
        if item.status != ReviewStatus::Adjudication {
            return Err(CurationError::IllegalTransition { status: item.status, action: "adjudicate".into() });
        }
        if decision.adjudicator_id.trim().is_empty() {
            return Err(CurationError::InvalidCorrection("adjudicator id is empty".into()));
        }
        if item.reviewers().contains(decision.adjudicator_id.as_str()) {
            return Err(CurationError::SelfAdjudication(decision.adjudicator_id));
        }
        if let AdjudicationOutcome::AdmitWith { correction_id } = &decision.outcome {
            if item.correction(correction_id).is_none() {
                return Err(CurationError::InvalidCorrection(format!("no correction {correction_id} on this item")));
            }
        }
        let (from, to) = self.apply_adjudication(item_id, decision.clone());
        self.push(item_id, expected_version, Some(from), to, AuditEvent::Adjudicated { decision });
        Ok(&self.items[item_id])
    }

    fn apply_adjudication(&mut self, item_id: &str, decision: AdjudicationDecision) -> (ReviewStatus, ReviewStatus) {
        let item = self.items.get_mut(item_id).expect("checked");
        let from = item.status;
        match &decision.outcome {
            AdjudicationOutcome::AdmitWith { correction_id } => {
                item.admitted_correction = Some(correction_id.clone());
                item.admission_basis =
                    Some(AdmissionBasis::Adjudicated { adjudicator_id: decision.adjudicator_id.clone() });
                item.status = ReviewStatus::Admitted;
            }
            AdjudicationOutcome::Exclude => item.status = ReviewStatus::Excluded,
        }
        item.adjudication = Some(decision);
        item.version += 1;
        (from, item.status)
    }

    /// Rebuilds a store by re-running every logged request.
    pub fn replay(config: CurationConfig, log: &[AuditEntry]) -> Result<Self, CurationError> {
        let mut store = Self::new(config);
        for entry in log {
            let corrupt = |reason: String| CurationError::CorruptLog { seq: entry.seq, reason };
            if entry.seq != store.log.len() as u64 + 1 {
                return Err(corrupt("sequence gap".into()));
            }
            match &entry.event {
                AuditEvent::Created { item } => {
                    if item.item_id != entry.item_id {
                        return Err(corrupt("item id mismatch".into()));
                    }
                    store
                        .create_item(
                            &item.item_id,
                            &item.article_id,
                            &item.language,
                            &item.article_text,
                            item.assessment.clone(),
                        )
                        .map_err(|e| corrupt(e.to_string()))?;
                }
                AuditEvent::Reviewed { correction } => {
                    let draft = CorrectionDraft {
                        expert_id: correction.expert_id.clone(),
                        severity: correction.severity.clone(),
                        spans: correction.spans.clone(),
                        rationale: correction.rationale.clone(),
                        rubric: correction.rubric,
                    };
                    store
                        .submit_review(&entry.item_id, entry.expected_version, draft, &correction.timestamp)
                        .map_err(|e| corrupt(e.to_string()))?;
                }
                AuditEvent::Adjudicated { decision } => {
                    store
                        .adjudicate(&entry.item_id, entry.expected_version, decision.clone())
                        .map_err(|e| corrupt(e.to_string()))?;
                }
            }
            let replayed = store.log.last().expect("entry applied");
            if replayed.to != entry.to || replayed.from != entry.from {
                return Err(corrupt(format!("replay reached {} instead of {}", replayed.to, entry.to)));
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::parse_model_output;

    const TEXT: &str = "Il governo ha definito i manifestanti una minaccia.";

    fn store() -> CurationStore {
        let mut s = CurationStore::new(CurationConfig {
            concordance_threshold: 0.5,
            severity_vocabulary: vec!["low".into(), "medium".into(), "high".into()],
        });
        let a = parse_model_output("<SEVERITY>low</SEVERITY><SPANS>[]</SPANS><RATIONALE>[]</RATIONALE>", &[]);
        s.create_item("it-1", "it-1", "it", TEXT, a).unwrap();
        s
    }

    fn flags() -> RubricFlags {
        RubricFlags { grounded_in_text: Some(true), locally_salient_framing: Some(true), non_generic: Some(false) }
    }

    fn span(text: &str) -> CorrectionSpan {
        let start = TEXT.find(text).map(|b| TEXT[..b].chars().count()).unwrap();
        CorrectionSpan { start, end: start + text.chars().count(), text: text.into() }
    }

    fn draft(expert: &str, severity: &str, spans: &[&str]) -> CorrectionDraft {
        CorrectionDraft {
            expert_id: expert.into(),
            severity: severity.into(),
            spans: spans.iter().map(|s| span(s)).collect(),
            rationale: if severity == NONE_LABEL { String::new() } else { format!("{expert} sees framing") },
            rubric: flags(),
        }
    }

    fn decision(who: &str, outcome: AdjudicationOutcome) -> AdjudicationDecision {
        AdjudicationDecision { adjudicator_id: who.into(), outcome, note: String::new() }
    }

    #[test]
    fn two_concordant_reviews_admit() {
        let mut s = store();
        s.submit_review("it-1", 0, draft("e1", "high", &["una minaccia"]), "t1").unwrap();
        let item = s.submit_review("it-1", 1, draft("e2", "high", &["minaccia"]), "t2").unwrap();
        assert_eq!(item.status, ReviewStatus::Admitted);
        assert!(item.adjudication.is_none());
        let rec = item.admission_record().unwrap();
        assert_eq!(rec.severity.as_deref(), Some("high"));
        assert_eq!(rec.spans[0].range, Some([38, 50]));
    }

    #[test]
    fn disagreement_then_exclusion() {
        let mut s = store();
        s.submit_review("it-1", 0, draft("e1", "high", &["minaccia"]), "t").unwrap();
        assert_eq!(
            s.submit_review("it-1", 1, draft("e2", "low", &["minaccia"]), "t").unwrap().status,
            ReviewStatus::InDiscussion
        );
        assert_eq!(
            s.submit_review("it-1", 2, draft("e1", "high", &["minaccia"]), "t").unwrap().status,
            ReviewStatus::InDiscussion
        );
        assert_eq!(
            s.submit_review("it-1", 3, draft("e2", "medium", &["minaccia"]), "t").unwrap().status,
            ReviewStatus::Adjudication
        );
        let item = s.adjudicate("it-1", 4, decision("e3", AdjudicationOutcome::Exclude)).unwrap();
        assert_eq!(item.status, ReviewStatus::Excluded);
        assert!(s.admissions().is_empty());
    }

    #[test]
    fn discussion_consensus_admits() {
        let mut s = store();
        s.submit_review("it-1", 0, draft("e1", "high", &["minaccia"]), "t").unwrap();
        s.submit_review("it-1", 1, draft("e2", "low", &["governo"]), "t").unwrap();
        s.submit_review("it-1", 2, draft("e2", "high", &["una minaccia"]), "t").unwrap();
        let item = s.submit_review("it-1", 3, draft("e1", "high", &["minaccia"]), "t").unwrap();
        assert_eq!(item.status, ReviewStatus::Admitted);
        assert!(matches!(item.admission_basis, Some(AdmissionBasis::Concordant { .. })));
    }

    #[test]
    fn guards() {
        let mut s = store();
        s.submit_review("it-1", 0, draft("e1", "high", &["minaccia"]), "t").unwrap();
        assert!(matches!(
            s.submit_review("it-1", 0, draft("e2", "high", &["minaccia"]), "t"),
            Err(CurationError::VersionConflict { expected: 0, actual: 1, .. })
        ));
        assert!(matches!(
            s.submit_review("it-1", 1, draft("e1", "high", &["minaccia"]), "t"),
            Err(CurationError::IllegalTransition { .. })
        ));
        assert!(matches!(
            s.adjudicate("it-1", 1, decision("e3", AdjudicationOutcome::Exclude)),
            Err(CurationError::IllegalTransition { status: ReviewStatus::ReviewedOnce, .. })
        ));
        s.submit_review("it-1", 1, draft("e2", "low", &["governo"]), "t").unwrap();
        assert!(matches!(
            s.submit_review("it-1", 2, draft("e3", "low", &["governo"]), "t"),
            Err(CurationError::IllegalTransition { .. })
        ));
        s.submit_review("it-1", 2, draft("e1", "high", &["minaccia"]), "t").unwrap();
        s.submit_review("it-1", 3, draft("e2", "low", &["governo"]), "t").unwrap();
        assert_eq!(
            s.adjudicate("it-1", 4, decision("e1", AdjudicationOutcome::Exclude)),
            Err(CurationError::SelfAdjudication("e1".into()))
        );
        assert!(matches!(
            s.adjudicate("it-1", 4, decision("e3", AdjudicationOutcome::AdmitWith { correction_id: "nope".into() })),
            Err(CurationError::InvalidCorrection(_))
        ));
        let item = s
            .adjudicate("it-1", 4, decision("e3", AdjudicationOutcome::AdmitWith { correction_id: "it-1#1".into() }))
            .unwrap();
        assert_eq!(item.status, ReviewStatus::Admitted);
    }

    #[test]
    fn correction_validation() {
        let mut s = store();
        let mut d = draft("e1", "high", &["minaccia"]);
        d.rubric.non_generic = None;
        assert!(matches!(s.submit_review("it-1", 0, d, "t"), Err(CurationError::InvalidCorrection(_))));
        let mut d = draft("e1", "high", &["minaccia"]);
        d.spans[0].end += 1;
        assert!(matches!(s.submit_review("it-1", 0, d, "t"), Err(CurationError::InvalidCorrection(_))));
        let mut d = draft("e1", "high", &["minaccia"]);
        d.spans[0].end = 999;
        assert!(matches!(s.submit_review("it-1", 0, d, "t"), Err(CurationError::InvalidCorrection(_))));
        assert!(matches!(
            s.submit_review("it-1", 0, draft("e1", "extreme", &["minaccia"]), "t"),
            Err(CurationError::InvalidCorrection(_))
        ));
        let mut none = draft("e1", NONE_LABEL, &[]);
        none.rationale = "x".into();
        assert!(matches!(s.submit_review("it-1", 0, none, "t"), Err(CurationError::InvalidCorrection(_))));
        assert_eq!(s.get("it-1").unwrap().version, 0);
        assert_eq!(s.log().len(), 1);
    }

    #[test]
    fn none_consensus_admits_empty_exemplar() {
        let mut s = store();
        s.submit_review("it-1", 0, draft("e1", NONE_LABEL, &[]), "t").unwrap();
        let item = s.submit_review("it-1", 1, draft("e2", NONE_LABEL, &[]), "t").unwrap();
        let rec = item.admission_record().unwrap();
        assert_eq!(rec.label, ArticleLabel::None);
        assert!(rec.spans.is_empty() && rec.rationale.is_empty());
    }

    #[test]
    fn replay_reconstructs_state() {
        let mut s = store();
        let a = parse_model_output("<SEVERITY>high</SEVERITY>", &[]);
        s.create_item("it-2", "it-2", "it", TEXT, a).unwrap();
        s.submit_review("it-1", 0, draft("e1", "high", &["minaccia"]), "t1").unwrap();
        s.submit_review("it-2", 0, draft("e1", "high", &["minaccia"]), "t2").unwrap();
        s.submit_review("it-2", 1, draft("e2", "low", &["governo"]), "t3").unwrap();
        let _ = s.submit_review("it-2", 1, draft("e2", "low", &["governo"]), "t4");

        let json: Vec<String> = s.log().iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        let log: Vec<AuditEntry> = json.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        let replayed = CurationStore::replay(s.config().clone(), &log).unwrap();
        assert_eq!(replayed, s);

        let mut broken = log.clone();
        broken.remove(2);
        assert!(matches!(CurationStore::replay(s.config().clone(), &broken), Err(CurationError::CorruptLog { .. })));
    }

    #[test]
    fn queue_filters() {
        let mut s = store();
        let a = parse_model_output("x", &[]);
        s.create_item("fa-1", "fa-1", "fa", "متن", a).unwrap();
        assert_eq!(s.queue(None).len(), 2);
        assert_eq!(s.queue(Some("fa")).len(), 1);
        s.submit_review("it-1", 0, draft("e1", "high", &["minaccia"]), "t").unwrap();
        s.submit_review("it-1", 1, draft("e2", "high", &["minaccia"]), "t").unwrap();
        assert_eq!(s.queue(Some("it")).len(), 0);
    }
}
