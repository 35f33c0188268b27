//! Automated scores: severity macro-F1, span F1, rationale similarity and
//! subgroup alignment disparity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine_similarity, EmbedError, Embedder, SimilarityError};
use crate::text::tokenize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no prediction/reference pairs to score")]
    EmptyInput,
    #[error("label {0:?} is outside the severity vocabulary")]
    UnknownLabel(String),
    #[error("group {0:?} has no scored pairs")]
    MissingGroup(String),
    #[error("rationale scorer unavailable: {0}")]
    ScorerUnavailable(String),
}

/// Rounds to 12 decimals so differences of two-decimal fixtures compare
/// exactly (`0.44 - 0.37` is `0.07000000000000001` in binary floating point).
pub fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Macro-averaged F1 over `(pred, ref)` pairs.
///
/// The mean runs over every label that occurs in either column. When
/// `allowed` is non-empty, any label outside it is rejected.
pub fn severity_macro_f1<S: AsRef<str>>(pairs: &[(S, S)], allowed: &[&str]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (pred, gold) in pairs {
        let (pred, gold) = (pred.as_ref(), gold.as_ref());
        for label in [pred, gold] {
            if !allowed.is_empty() && !allowed.contains(&label) {
                return Err(MetricError::UnknownLabel(label.to_string()));
            }
        }
        if pred == gold {
            counts.entry(pred).or_default().0 += 1;
        } else {
            counts.entry(pred).or_default().1 += 1;
            counts.entry(gold).or_default().2 += 1;
        }
    }
    let scores: Vec<f64> = counts.values().map(|&(tp, fp, fn_)| f1(tp, fp, fn_)).collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Multiset token-overlap F1 between two token lists.
pub fn token_overlap_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut bag: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *bag.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(n) = bag.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best-match span F1 for one item.
///
/// Both empty scores 1.0 and exactly one empty scores 0.0. Otherwise pairs
/// are matched greedily by descending token-overlap F1 without reuse, and
/// the matched sum is divided by `max(|pred|, |gold|)`.
pub fn span_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        (false, false) => {}
    }
    let pred_tokens: Vec<Vec<String>> = pred.iter().map(|s| tokenize(s.as_ref())).collect();
    let gold_tokens: Vec<Vec<String>> = gold.iter().map(|s| tokenize(s.as_ref())).collect();

    let mut pairs = Vec::with_capacity(pred.len() * gold.len());
    for (i, p) in pred_tokens.iter().enumerate() {
        for (j, g) in gold_tokens.iter().enumerate() {
            let score = token_overlap_f1(p, g);
            if score > 0.0 {
                pairs.push((score, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut total = 0.0;
    for (score, i, j) in pairs {
        if !pred_used[i] && !gold_used[j] {
            pred_used[i] = true;
            gold_used[j] = true;
            total += score;
        }
    }
    (total / pred.len().max(gold.len()) as f64).clamp(0.0, 1.0)
}

/// Scores a generated rationale against the reference rationale.
pub trait RationaleScorer: Send + Sync {
    fn id(&self) -> String;

    fn score(&self, pred: &str, gold: &str) -> Result<f64, MetricError>;

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, MetricError> {
        pairs.iter().map(|(p, g)| self.score(p, g)).collect()
    }
}

/// Cosine similarity of the two texts' embeddings; a zero vector scores 0.
pub struct EmbeddingCosineScorer {
    embedder: Arc<Embedder>,
}

impl EmbeddingCosineScorer {
    pub fn new(embedder: Arc<Embedder>) -> Self {
        Self { embedder }
    }
}

fn unavailable(e: EmbedError) -> MetricError {
    MetricError::ScorerUnavailable(e.to_string())
}

fn cosine_or_zero(u: &[f32], v: &[f32]) -> Result<f64, MetricError> {
    match cosine_similarity(u, v) {
        Ok(s) => Ok(s),
        Err(SimilarityError::ZeroNorm) => Ok(0.0),
        Err(e) => Err(MetricError::ScorerUnavailable(e.to_string())),
    }
}

impl RationaleScorer for EmbeddingCosineScorer {
    fn id(&self) -> String {
        format!("embedding-cosine:{}", self.embedder.provider_id())
    }

    fn score(&self, pred: &str, gold: &str) -> Result<f64, MetricError> {
        let u = self.embedder.embed_one(pred).map_err(unavailable)?;
        let v = self.embedder.embed_one(gold).map_err(unavailable)?;
        cosine_or_zero(&u, &v)
    }

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, MetricError> {
        let texts: Vec<String> = pairs.iter().flat_map(|(p, g)| [p.clone(), g.clone()]).collect();
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let vectors = self.embedder.embed_batch(&texts).map_err(unavailable)?;
        vectors.chunks(2).map(|pair| cosine_or_zero(&pair[0], &pair[1])).collect()
    }
}

fn both_blank(pred: &str, gold: &str) -> bool {
    pred.trim().is_empty() && gold.trim().is_empty()
}

/// Rationale similarity with the empty-empty convention applied before the
/// scorer is consulted.
pub fn rationale_similarity(pred: &str, gold: &str, scorer: &dyn RationaleScorer) -> Result<f64, MetricError> {
    if both_blank(pred, gold) {
        return Ok(1.0);
    }
    scorer.score(pred, gold)
}

/// Batch form of [`rationale_similarity`].
pub fn rationale_similarity_batch(
    pairs: &[(String, String)],
    scorer: &dyn RationaleScorer,
) -> Result<Vec<f64>, MetricError> {
    let pending: Vec<(String, String)> = pairs.iter().filter(|(p, g)| !both_blank(p, g)).cloned().collect();
    let mut scored = scorer.score_batch(&pending)?.into_iter();
    pairs
        .iter()
        .map(|(p, g)| {
            if both_blank(p, g) {
                Ok(1.0)
            } else {
                scored.next().ok_or_else(|| MetricError::ScorerUnavailable("scorer returned too few scores".into()))
            }
        })
        .collect()
}

/// Severity F1 of one model against two reference subgroups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSlice {
    pub grouping_key: String,
    pub group_a: String,
    pub group_b: String,
    pub metric: String,
    pub f1_a: f64,
    pub f1_b: f64,
    pub delta: f64,
}

/// `|f1_a - f1_b|`, rounded to 12 decimals.
pub fn disparity(f1_a: f64, f1_b: f64) -> f64 {
    round12((f1_a - f1_b).abs())
}

impl SubgroupSlice {
    pub fn new(grouping_key: &str, group_a: &str, group_b: &str, f1_a: f64, f1_b: f64) -> Self {
        Self {
            grouping_key: grouping_key.to_string(),
            group_a: group_a.to_string(),
            group_b: group_b.to_string(),
            metric: "severity_macro_f1".to_string(),
            f1_a,
            f1_b,
            delta: disparity(f1_a, f1_b),
        }
    }
}

/// Severity macro-F1 per group and Δ for each requested pairing.
///
/// With no explicit pairings every unordered pair of groups is reported.
pub fn alignment_disparity(
    grouping_key: &str,
    groups: &BTreeMap<String, Vec<(String, String)>>,
    pairings: &[(String, String)],
    allowed: &[&str],
) -> Result<Vec<SubgroupSlice>, MetricError> {
    let mut scores = BTreeMap::new();
    for (group, pairs) in groups {
        if pairs.is_empty() {
            continue;
        }
        scores.insert(group.as_str(), severity_macro_f1(pairs, allowed)?);
    }
    let pairings: Vec<(String, String)> = if pairings.is_empty() {
        let names: Vec<&str> = scores.keys().copied().collect();
        if names.len() < 2 {
            return Err(MetricError::MissingGroup(names.first().map_or(String::new(), |n| n.to_string())));
        }
        let mut all = Vec::new();
        for (i, a) in names.iter().enumerate() {
            for b in &names[i + 1..] {
                all.push((a.to_string(), b.to_string()));
            }
        }
        all
    } else {
        pairings.to_vec()
    };
    pairings
        .iter()
        .map(|(a, b)| {
            let fa = *scores.get(a.as_str()).ok_or_else(|| MetricError::MissingGroup(a.clone()))?;
            let fb = *scores.get(b.as_str()).ok_or_else(|| MetricError::MissingGroup(b.clone()))?;
            Ok(SubgroupSlice::new(grouping_key, a, b, fa, fb))
        })
        .collect()
}

/// Labels appearing in a set of pairs, sorted.
pub fn labels_in<S: AsRef<str>>(pairs: &[(S, S)]) -> BTreeSet<String> {
    pairs.iter().flat_map(|(p, g)| [p.as_ref().to_string(), g.as_ref().to_string()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedNgramEmbedder;

    fn pairs(preds: &[&str], refs: &[&str]) -> Vec<(String, String)> {
        preds.iter().zip(refs).map(|(p, r)| (p.to_string(), r.to_string())).collect()
    }

    /// Confusion-matrix oracle written independently of the implementation.
    fn macro_f1_oracle(preds: &[String], refs: &[String]) -> f64 {
        let mut labels: Vec<&String> = preds.iter().chain(refs).collect();
        labels.sort();
        labels.dedup();
        let mut total = 0.0;
        for l in &labels {
            let tp = preds.iter().zip(refs).filter(|(p, r)| p == l && r == l).count() as f64;
            let fp = preds.iter().zip(refs).filter(|(p, r)| p == l && r != l).count() as f64;
            let fn_ = preds.iter().zip(refs).filter(|(p, r)| p != l && r == l).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            total += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        }
        total / labels.len() as f64
    }

    #[test]
    fn macro_f1_fixture() {
        // A: P=1 R=1/2 -> 2/3; B: P=1/2 R=1 -> 2/3
        let v = severity_macro_f1(&pairs(&["A", "B", "B"], &["A", "A", "B"]), &[]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-9);
        assert!((v - 0.6667).abs() < 1e-4);
        assert_eq!(severity_macro_f1(&pairs(&["x", "y"], &["x", "y"]), &[]).unwrap(), 1.0);
        assert_eq!(severity_macro_f1(&pairs(&["x"], &["y"]), &[]).unwrap(), 0.0);
        assert_eq!(severity_macro_f1::<String>(&[], &[]), Err(MetricError::EmptyInput));
        assert_eq!(severity_macro_f1(&pairs(&["Q"], &["A"]), &["A", "B"]), Err(MetricError::UnknownLabel("Q".into())));
    }

    #[test]
    fn unparsed_counts_as_wrong() {
        let with_failures = severity_macro_f1(&pairs(&["A", "UNPARSED"], &["A", "A"]), &[]).unwrap();
        let dropped = severity_macro_f1(&pairs(&["A"], &["A"]), &[]).unwrap();
        assert!(with_failures < dropped);
    }

    #[test]
    fn span_empty_rules() {
        let none: [&str; 0] = [];
        assert_eq!(span_f1(&none, &none), 1.0);
        assert_eq!(span_f1(&["x"], &none), 0.0);
        assert_eq!(span_f1(&none, &["x"]), 0.0);
    }

    #[test]
    fn span_partial_overlap_fixture() {
        // P = 1, R = 1/2, F1 = 2/3
        assert!((span_f1(&["a b"], &["a b c d"]) - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(span_f1(&["A  B"], &["a b"]), 1.0);
        // one perfect match out of two gold spans
        assert!((span_f1(&["x y"], &["x y", "z"]) - 0.5).abs() < 1e-12);
        // over-generation is penalized
        assert!((span_f1(&["x y", "q", "r"], &["x y"]) - 1.0 / 3.0).abs() < 1e-12);
        // multiset overlap: repeated tokens count once per occurrence
        assert!((span_f1(&["a a"], &["a b"]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn span_greedy_does_not_reuse() {
        // both predictions overlap the same gold span; only one may match it
        let v = span_f1(&["a b", "a b c"], &["a b", "z"]);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn farsi_tokens_are_not_case_folded_away() {
        assert_eq!(span_f1(&["قیمت نان"], &["قیمت نان"]), 1.0);
        assert!((span_f1(&["قیمت"], &["قیمت نان"]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rationale_conventions() {
        let scorer = EmbeddingCosineScorer::new(Arc::new(Embedder::new(Arc::new(HashedNgramEmbedder::new(3, 512)))));
        assert_eq!(rationale_similarity("", "", &scorer).unwrap(), 1.0);
        assert_eq!(rationale_similarity("", "the framing is hostile", &scorer).unwrap(), 0.0);
        let same = rationale_similarity("ironic metaphor", "ironic metaphor", &scorer).unwrap();
        assert!((same - 1.0).abs() < 1e-9);
        let batch = rationale_similarity_batch(
            &[("".into(), "".into()), ("a b".into(), "a b".into()), ("".into(), "x".into())],
            &scorer,
        )
        .unwrap();
        assert_eq!(batch[0], 1.0);
        assert!((batch[1] - 1.0).abs() < 1e-9);
        assert_eq!(batch[2], 0.0);
    }

    #[test]
    fn disparity_fixtures() {
        assert_eq!(disparity(0.44, 0.37), 0.07);
        assert_eq!(disparity(0.36, 0.47), 0.11);
        assert_eq!(disparity(0.5, 0.5), 0.0);
    }

    #[test]
    fn alignment_disparity_over_groups() {
        let mut groups = BTreeMap::new();
        groups.insert("female".to_string(), pairs(&["A", "B"], &["A", "B"]));
        groups.insert("male".to_string(), pairs(&["A", "B"], &["A", "A"]));
        let slices = alignment_disparity("gender", &groups, &[], &[]).unwrap();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].f1_a, 1.0);
        let male = severity_macro_f1(&pairs(&["A", "B"], &["A", "A"]), &[]).unwrap();
        assert_eq!(slices[0].delta, disparity(1.0, male));

        let missing = alignment_disparity("gender", &groups, &[("female".into(), "other".into())], &[]);
        assert_eq!(missing, Err(MetricError::MissingGroup("other".into())));
        groups.remove("male");
        assert!(matches!(alignment_disparity("gender", &groups, &[], &[]), Err(MetricError::MissingGroup(_))));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn label() -> impl Strategy<Value = String> {
            prop::sample::select(vec!["low", "medium", "high", "None", "UNPARSED"]).prop_map(String::from)
        }

        fn span() -> impl Strategy<Value = String> {
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "D", "e", "نان"]), 1..5)
                .prop_map(|t| t.join(" "))
        }

        proptest! {
            #[test]
            fn macro_f1_matches_oracle(labels in prop::collection::vec((label(), label()), 1..100)) {
                let preds: Vec<String> = labels.iter().map(|l| l.0.clone()).collect();
                let refs: Vec<String> = labels.iter().map(|l| l.1.clone()).collect();
                let got = severity_macro_f1(&labels, &[]).unwrap();
                prop_assert!((got - macro_f1_oracle(&preds, &refs)).abs() < 1e-12);
            }

            #[test]
            fn span_f1_in_unit_interval(
                pred in prop::collection::vec(span(), 0..5),
                gold in prop::collection::vec(span(), 0..5),
            ) {
                let v = span_f1(&pred, &gold);
                prop_assert!((0.0..=1.0).contains(&v));
                if pred.is_empty() && gold.is_empty() {
                    prop_assert_eq!(v, span_f1(&gold, &pred));
                }
            }

            #[test]
            fn adding_gold_span_never_lowers_score(
                (pred, gold) in prop::collection::vec(span(), 1..6).prop_flat_map(|gold| {
                    let n = gold.len();
                    (prop::collection::vec(span(), 0..n), Just(gold))
                }),
                pick in any::<prop::sample::Index>(),
            ) {
                let mut more = pred.clone();
                more.push(gold[pick.index(gold.len())].clone());
                prop_assert!(span_f1(&more, &gold) + 1e-12 >= span_f1(&pred, &gold));
            }

            #[test]
            fn delta_is_symmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
                prop_assert_eq!(disparity(a, b), disparity(b, a));
                prop_assert!(disparity(a, b) >= 0.0);
            }
        }
    }
}
