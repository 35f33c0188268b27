//! Seeded synthetic multi-annotator corpora for demos and tests.
//!
//! Articles are random sentences over small per-language word lists. Each
//! article draws a scenario: agreed `None`, one or more `Problematic`
//! annotations (possibly with diverging severities), a `None`/`Problematic`
//! split, or unusable rows (`NA` or missing fields).

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotationRecord, Label};

const FA_WORDS: &[&str] = &[
    "دولت",
    "مردم",
    "قیمت",
    "نان",
    "بازار",
    "خبر",
    "رسانه",
    "تهران",
    "اعتراض",
    "دشمن",
    "امنیت",
    "اقتصاد",
    "مجلس",
    "وزیر",
    "گزارش",
    "خیابان",
    "جوانان",
    "آینده",
    "فرهنگ",
    "تاریخ",
    "مرز",
    "همسایه",
    "تحریم",
    "نفت",
];

const IT_WORDS: &[&str] = &[
    "governo",
    "cittadini",
    "prezzi",
    "pane",
    "mercato",
    "notizia",
    "stampa",
    "Roma",
    "protesta",
    "nemico",
    "sicurezza",
    "economia",
    "parlamento",
    "ministro",
    "rapporto",
    "strada",
    "giovani",
    "futuro",
    "cultura",
    "storia",
    "confine",
    "vicini",
    "sanzioni",
    "energia",
];

const EN_WORDS: &[&str] = &[
    "government",
    "people",
    "prices",
    "bread",
    "market",
    "news",
    "press",
    "capital",
    "protest",
    "enemy",
    "security",
    "economy",
    "parliament",
    "minister",
    "report",
    "street",
    "youth",
    "future",
    "culture",
    "history",
    "border",
    "neighbours",
    "sanctions",
    "energy",
];

pub fn words_for(language: &str) -> &'static [&'static str] {
    match language {
        "fa" => FA_WORDS,
        "it" => IT_WORDS,
        _ => EN_WORDS,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub languages: Vec<String>,
    pub articles_per_language: usize,
    /// Upper bound on annotators per article (at least 1).
    pub max_annotators: usize,
    pub severity_vocabulary: Vec<String>,
    /// Share of articles given a conflicting or unusable scenario.
    pub edge_case_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            languages: vec!["fa".into(), "it".into()],
            articles_per_language: 150,
            max_annotators: 3,
            severity_vocabulary: vec!["low".into(), "medium".into(), "high".into()],
            edge_case_rate: 0.2,
            seed: 7,
        }
    }
}

struct Annotator {
    id: String,
    meta: BTreeMap<String, String>,
}

fn annotators(language: &str) -> Vec<Annotator> {
    (0..8)
        .map(|i| Annotator {
            id: format!("ann-{language}-{i}"),
            meta: [
                ("gender".to_string(), if i % 2 == 0 { "F" } else { "M" }.to_string()),
                ("l1".to_string(), if i < 6 { language } else { "other" }.to_string()),
            ]
            .into(),
        })
        .collect()
}

fn sentence(rng: &mut ChaCha8Rng, words: &[&str], len: usize) -> String {
    (0..len).map(|_| *words.choose(rng).expect("word list")).collect::<Vec<_>>().join(" ")
}

fn article_text(rng: &mut ChaCha8Rng, words: &[&str]) -> String {
    let sentences = rng.random_range(2..=4);
    (0..sentences)
        .map(|_| {
            let n = rng.random_range(6..=12);
            format!("{}.", sentence(rng, words, n))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// A random whole-word window of `text` as `(surface, [start, end))`.
fn span_of(rng: &mut ChaCha8Rng, text: &str) -> (String, [usize; 2]) {
    let chars: Vec<char> = text.chars().collect();
    let mut bounds = Vec::new();
    let mut start = None;
    for (i, c) in chars.iter().enumerate() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                bounds.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        bounds.push((s, chars.len()));
    }
    let width = rng.random_range(1..=3).min(bounds.len());
    let first = rng.random_range(0..=bounds.len() - width);
    let (s, e) = (bounds[first].0, bounds[first + width - 1].1);
    (chars[s..e].iter().collect(), [s, e])
}

fn rationale(rng: &mut ChaCha8Rng, words: &[&str], min_words: usize) -> String {
    let n = rng.random_range(min_words..min_words + 8);
    format!("{}.", sentence(rng, words, n))
}

/// Generates the corpus records, ordered by article then record id.
pub fn synthetic_corpus(config: &SynthConfig) -> Vec<AnnotationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab: Vec<&str> = if config.severity_vocabulary.is_empty() {
        vec!["high"]
    } else {
        config.severity_vocabulary.iter().map(String::as_str).collect()
    };
    let mut out = Vec::new();
    for language in &config.languages {
        let words = words_for(language);
        let pool = annotators(language);
        for a in 0..config.articles_per_language {
            let article_id = format!("{language}-{a:04}");
            let text = article_text(&mut rng, words);
            let n = rng.random_range(1..=config.max_annotators.max(1));
            let chosen: Vec<&Annotator> = pool.choose_multiple(&mut rng, n).collect();
            let edge = rng.random_bool(config.edge_case_rate.clamp(0.0, 1.0));
            let problematic = rng.random_bool(0.6);
            let severity = *vocab.choose(&mut rng).expect("vocabulary");
            let scenario = if edge { rng.random_range(0..4) } else { 4 };

            for (j, ann) in chosen.iter().enumerate() {
                let mut rec = AnnotationRecord {
                    record_id: format!("{article_id}-r{j}"),
                    article_id: article_id.clone(),
                    language: language.clone(),
                    article_text: text.clone(),
                    label: Label::None,
                    severity: None,
                    span_text: None,
                    span_offsets: None,
                    rationale: None,
                    annotator_id: ann.id.clone(),
                    annotator_meta: ann.meta.clone(),
                };
                let this_problematic = match scenario {
                    // binary split: the first annotator disagrees with the rest
                    0 => (j == 0) != problematic,
                    _ => problematic,
                };
                if this_problematic {
                    let (surface, range) = span_of(&mut rng, &text);
                    rec.label = Label::Problematic;
                    rec.severity = Some(match scenario {
                        // diverging severities
                        1 => vocab.choose(&mut rng).expect("vocabulary").to_string(),
                        _ => severity.to_string(),
                    });
                    rec.span_text = Some(vec![surface]);
                    rec.span_offsets = Some(vec![range]);
                    rec.rationale = Some(rationale(&mut rng, words, 4));
                    if scenario == 2 && j == 0 {
                        match rng.random_range(0..3) {
                            0 => rec.severity = None,
                            1 => {
                                rec.span_text = None;
                                rec.span_offsets = None;
                            }
                            _ => rec.rationale = None,
                        }
                    }
                }
                if scenario == 3 && j == 0 {
                    rec.label = Label::NotApplicable;
                    rec.severity = None;
                    rec.span_text = None;
                    rec.span_offsets = None;
                    rec.rationale = None;
                }
                out.push(rec);
            }
        }
    }
    out
}

/// Serializes records as one JSON object per line.
pub fn to_jsonl(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_master_table, parse_annotations, CorpusFormat};

    #[test]
    fn corpus_parses_and_is_deterministic() {
        let config = SynthConfig { articles_per_language: 60, ..Default::default() };
        let records = synthetic_corpus(&config);
        assert_eq!(records, synthetic_corpus(&config));
        let raw = to_jsonl(&records);
        let parsed = parse_annotations(raw.as_bytes(), &CorpusFormat::default()).unwrap();
        assert_eq!(parsed, records);
        let holdout = [("fa".to_string(), 20), ("it".to_string(), 20)].into();
        let (split, report) = build_master_table(raw.as_bytes(), &CorpusFormat::default(), &holdout, 1).unwrap();
        assert_eq!(split.test.len(), 40);
        assert!(!report.excluded_binary_conflicts.is_empty());
        assert!(report.rejected_by_reason.len() >= 2);
    }
}
