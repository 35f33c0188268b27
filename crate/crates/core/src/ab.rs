//! Blinded A/B rationale rating: assignment, export, import and aggregation.
//!
//! Each evaluator gets a disjoint slice of a language's test items. Every
//! item shows two rationales from a fixed pair of conditions in a random
//! left/right order. The evaluator-facing export carries no condition or
//! model fields; the side-to-condition map lives in a separate provenance
//! file.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptCondition;
use crate::text::sha256_hex;

pub const LIKERT_MIN: u8 = 1;
pub const LIKERT_MAX: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AbError {
    #[error("{items} {language} items cannot be split evenly across {evaluators} evaluators")]
    IndivisiblePartition { language: String, items: usize, evaluators: usize },
    #[error("rating for {evaluator_id}/{item_id} has no matching assignment")]
    OrphanRating { evaluator_id: String, item_id: String },
    #[error("rating for {0} lacks a side or a score")]
    IncompleteItem(String),
    #[error("{field} = {value} is outside the 1..4 scale")]
    ScoreOutOfRange { field: &'static str, value: u8 },
    #[error("item {0} is not in this assignment")]
    ItemNotInAssignment(String),
    #[error("the two conditions of an A/B pair must differ")]
    DegeneratePair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One presented item inside an assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbItem {
    pub item_id: String,
    pub left: PromptCondition,
    pub right: PromptCondition,
}

impl AbItem {
    pub fn condition(&self, side: Side) -> PromptCondition {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }
}

/// An evaluator's item set, with the placement of each condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbAssignment {
    pub evaluator_id: String,
    pub language: String,
    pub seed: u64,
    pub items: Vec<AbItem>,
}

impl AbAssignment {
    pub fn item_ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.item_id.as_str()).collect()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.items.iter().any(|i| i.item_id == item_id)
    }
}

fn language_rng(seed: u64, language: &str) -> ChaCha8Rng {
    let digest = sha256_hex(format!("ab:{seed}:{language}").as_bytes());
    let mut bytes = [0u8; 32];
    hex::decode_to_slice(&digest, &mut bytes).expect("sha256 hex is 32 bytes");
    ChaCha8Rng::from_seed(bytes)
}

/// Opaque evaluator id for slot `index` of `language`.
pub fn evaluator_id(language: &str, index: usize) -> String {
    format!("ev-{language}-{:02}", index + 1)
}

/// Partitions each language's items across its evaluators.
///
/// Items are shuffled with a per-language generator derived from `seed`, cut
/// into equal consecutive chunks, and each item's left/right placement is
/// drawn independently.
pub fn build_ab_assignments(
    items_by_language: &BTreeMap<String, Vec<String>>,
    evaluators: &BTreeMap<String, usize>,
    pair: (PromptCondition, PromptCondition),
    seed: u64,
) -> Result<Vec<AbAssignment>, AbError> {
    if pair.0 == pair.1 {
        return Err(AbError::DegeneratePair);
    }
    let mut out = Vec::new();
    for (language, &count) in evaluators {
        let mut items: Vec<String> = items_by_language.get(language).cloned().unwrap_or_default();
        items.sort();
        items.dedup();
        if count == 0 || items.is_empty() || !items.len().is_multiple_of(count) {
            return Err(AbError::IndivisiblePartition {
                language: language.clone(),
                items: items.len(),
                evaluators: count,
            });
        }
        let mut rng = language_rng(seed, language);
        items.shuffle(&mut rng);
        let per = items.len() / count;
        for (index, chunk) in items.chunks(per).enumerate() {
            let items = chunk
                .iter()
                .map(|item_id| {
                    let (left, right) = if rng.random_bool(0.5) { pair } else { (pair.1, pair.0) };
                    AbItem { item_id: item_id.clone(), left, right }
                })
                .collect();
            out.push(AbAssignment {
                evaluator_id: evaluator_id(language, index),
                language: language.clone(),
                seed,
                items,
            });
        }
    }
    Ok(out)
}

/// Hidden side-to-condition map for one presented item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub evaluator_id: String,
    pub language: String,
    pub item_id: String,
    pub left: PromptCondition,
    pub right: PromptCondition,
    pub model_id: String,
    pub seed: u64,
}

pub fn provenance(assignments: &[AbAssignment], model_id: &str) -> Vec<ProvenanceRecord> {
    assignments
        .iter()
        .flat_map(|a| {
            a.items.iter().map(move |i| ProvenanceRecord {
                evaluator_id: a.evaluator_id.clone(),
                language: a.language.clone(),
                item_id: i.item_id.clone(),
                left: i.left,
                right: i.right,
                model_id: model_id.to_string(),
                seed: a.seed,
            })
        })
        .collect()
}

/// The four Likert scores given to one side; unset fields mean unanswered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreFields {
    pub overall: Option<u8>,
    pub grounding: Option<u8>,
    pub cultural_nuance: Option<u8>,
    pub nongeneric: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideScores {
    pub overall: u8,
    pub grounding: u8,
    pub cultural_nuance: u8,
    pub nongeneric: u8,
}

pub const DIMENSIONS: [&str; 4] = ["overall", "grounding", "cultural_nuance", "nongeneric"];

impl SideScores {
    pub fn validate(&self) -> Result<(), AbError> {
        for (field, value) in DIMENSIONS.into_iter().zip(self.values()) {
            if !(LIKERT_MIN..=LIKERT_MAX).contains(&value) {
                return Err(AbError::ScoreOutOfRange { field, value });
            }
        }
        Ok(())
    }

    pub fn values(&self) -> [u8; 4] {
        [self.overall, self.grounding, self.cultural_nuance, self.nongeneric]
    }
}

impl ScoreFields {
    pub fn complete(&self) -> Option<SideScores> {
        Some(SideScores {
            overall: self.overall?,
            grounding: self.grounding?,
            cultural_nuance: self.cultural_nuance?,
            nongeneric: self.nongeneric?,
        })
    }
}

/// A completed rating of one item by one evaluator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbRating {
    pub evaluator_id: String,
    pub item_id: String,
    pub left: SideScores,
    pub right: SideScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

impl AbRating {
    pub fn validate(&self) -> Result<(), AbError> {
        self.left.validate()?;
        self.right.validate()
    }

    pub fn side(&self, side: Side) -> &SideScores {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

/// Evaluator-facing record: one line per item, blank score fields.
///
/// Completed questionnaires come back in the same layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorRecord {
    pub evaluator_id: String,
    pub language: String,
    pub item_id: String,
    pub article_text: String,
    pub rationale_left: String,
    pub rationale_right: String,
    #[serde(default)]
    pub scores_left: ScoreFields,
    #[serde(default)]
    pub scores_right: ScoreFields,
    #[serde(default)]
    pub comment: Option<String>,
}

impl EvaluatorRecord {
    pub fn to_rating(&self) -> Result<AbRating, AbError> {
        let incomplete = || AbError::IncompleteItem(self.item_id.clone());
        let rating = AbRating {
            evaluator_id: self.evaluator_id.clone(),
            item_id: self.item_id.clone(),
            left: self.scores_left.complete().ok_or_else(incomplete)?,
            right: self.scores_right.complete().ok_or_else(incomplete)?,
            comment: self.comment.clone().filter(|c| !c.trim().is_empty()),
        };
        rating.validate()?;
        Ok(rating)
    }
}

/// Builds the blinded export. `text` and `rationale` look up article text
/// and a condition's generated rationale for an item.
pub fn export_for_evaluators(
    assignments: &[AbAssignment],
    text: impl Fn(&str) -> String,
    rationale: impl Fn(&str, PromptCondition) -> String,
) -> Vec<EvaluatorRecord> {
    assignments
        .iter()
        .flat_map(|a| {
            let text = &text;
            let rationale = &rationale;
            a.items.iter().map(move |i| EvaluatorRecord {
                evaluator_id: a.evaluator_id.clone(),
                language: a.language.clone(),
                item_id: i.item_id.clone(),
                article_text: text(&i.item_id),
                rationale_left: rationale(&i.item_id, i.left),
                rationale_right: rationale(&i.item_id, i.right),
                scores_left: ScoreFields::default(),
                scores_right: ScoreFields::default(),
                comment: None,
            })
        })
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// `sd` uses the `n - 1` denominator and is 0 for fewer than two values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd =
            if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Some(Self { n, mean, sd })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

/// Per-condition score summaries plus head-to-head counts on `overall`.
///
/// Wins are counted for the `challenger` condition against the `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbSummary {
    pub items: usize,
    /// condition -> dimension -> mean/sd
    pub scores: BTreeMap<PromptCondition, BTreeMap<String, MeanSd>>,
    pub head_to_head: WinTieLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub baseline: PromptCondition,
    pub challenger: PromptCondition,
    pub overall: AbSummary,
    pub by_language: BTreeMap<String, AbSummary>,
    /// grouping key -> group value -> summary
    #[serde(default)]
    pub by_evaluator_group: BTreeMap<String, BTreeMap<String, AbSummary>>,
}

struct Unblinded<'a> {
    language: &'a str,
    evaluator_id: &'a str,
    scores: BTreeMap<PromptCondition, &'a SideScores>,
}

fn summarize(rows: &[&Unblinded<'_>], baseline: PromptCondition, challenger: PromptCondition) -> AbSummary {
    let mut scores = BTreeMap::new();
    for condition in [baseline, challenger] {
        let mut dims = BTreeMap::new();
        for (d, name) in DIMENSIONS.iter().enumerate() {
            let values: Vec<f64> = rows.iter().map(|r| r.scores[&condition].values()[d] as f64).collect();
            if let Some(stats) = MeanSd::of(&values) {
                dims.insert(name.to_string(), stats);
            }
        }
        scores.insert(condition, dims);
    }
    let mut head_to_head = WinTieLoss::default();
    for r in rows {
        let c = r.scores[&challenger].overall;
        let b = r.scores[&baseline].overall;
        match c.cmp(&b) {
            std::cmp::Ordering::Greater => head_to_head.wins += 1,
            std::cmp::Ordering::Equal => head_to_head.ties += 1,
            std::cmp::Ordering::Less => head_to_head.losses += 1,
        }
    }
    AbSummary { items: rows.len(), scores, head_to_head }
}

/// Unblinds ratings through `provenance` and summarizes them.
///
/// A later rating of the same `(evaluator, item)` replaces an earlier one.
/// `evaluator_groups` maps a grouping key to evaluator id -> group value.
pub fn aggregate_ab_ratings(
    ratings: &[AbRating],
    provenance: &[ProvenanceRecord],
    evaluator_groups: &BTreeMap<String, BTreeMap<String, String>>,
) -> Result<AbReport, AbError> {
    let first = provenance.first().ok_or_else(|| match ratings.first() {
        Some(r) => AbError::OrphanRating { evaluator_id: r.evaluator_id.clone(), item_id: r.item_id.clone() },
        None => AbError::IncompleteItem(String::new()),
    })?;
    let pair: BTreeSet<PromptCondition> = [first.left, first.right].into();
    let (baseline, challenger) = if pair.contains(&PromptCondition::B1) && pair.len() == 2 {
        // the static condition is the baseline whenever it takes part
        let other = *pair.iter().find(|c| **c != PromptCondition::B1).unwrap();
        (PromptCondition::B1, other)
    } else {
        (first.left.min(first.right), first.left.max(first.right))
    };

    let index: BTreeMap<(&str, &str), &ProvenanceRecord> =
        provenance.iter().map(|p| ((p.evaluator_id.as_str(), p.item_id.as_str()), p)).collect();
    let mut latest: BTreeMap<(&str, &str), &AbRating> = BTreeMap::new();
    for r in ratings {
        let key = (r.evaluator_id.as_str(), r.item_id.as_str());
        if !index.contains_key(&key) {
            return Err(AbError::OrphanRating { evaluator_id: r.evaluator_id.clone(), item_id: r.item_id.clone() });
        }
        r.validate()?;
        latest.insert(key, r);
    }

    let rows: Vec<Unblinded<'_>> = latest
        .iter()
        .map(|(key, r)| {
            let p = index[key];
            let scores: BTreeMap<_, _> = [(p.left, &r.left), (p.right, &r.right)].into();
            if !scores.contains_key(&baseline) || !scores.contains_key(&challenger) {
                return Err(AbError::IncompleteItem(r.item_id.clone()));
            }
            Ok(Unblinded { language: &p.language, evaluator_id: &p.evaluator_id, scores })
        })
        .collect::<Result<_, _>>()?;

    let all: Vec<&Unblinded<'_>> = rows.iter().collect();
    let mut languages: BTreeMap<&str, Vec<&Unblinded<'_>>> = BTreeMap::new();
    for r in &rows {
        languages.entry(r.language).or_default().push(r);
    }
    let mut by_evaluator_group = BTreeMap::new();
    for (key, members) in evaluator_groups {
        let mut groups: BTreeMap<&str, Vec<&Unblinded<'_>>> = BTreeMap::new();
        for r in &rows {
            if let Some(group) = members.get(r.evaluator_id) {
                groups.entry(group.as_str()).or_default().push(r);
            }
        }
        by_evaluator_group.insert(
            key.clone(),
            groups.into_iter().map(|(g, rs)| (g.to_string(), summarize(&rs, baseline, challenger))).collect(),
        );
    }

    Ok(AbReport {
        baseline,
        challenger,
        overall: summarize(&all, baseline, challenger),
        by_language: languages
            .into_iter()
            .map(|(l, rs)| (l.to_string(), summarize(&rs, baseline, challenger)))
            .collect(),
        by_evaluator_group,
    })
}
