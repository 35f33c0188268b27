//! On-disk layout of an ingested corpus.
//!
//! ```text
//! master.jsonl          every clean article (bank then test)
//! bank.jsonl            retrieval side of the split
//! test.jsonl            held-out side
//! annotations.jsonl     annotation records that passed filtering
//! static.jsonl          fixed B1 exemplars per language
//! test_ids.json         held-out article ids
//! split.json            seed, holdout sizes, languages, vocabulary
//! pipeline_report.json  counts per cleaning step
//! pipeline_report.txt
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use exbank_core::bank::ExemplarRecord;
use exbank_core::corpus::{AnnotationRecord, ArticleLabel, BankSplit, CleanArticle, PipelineReport};
use exbank_gateway::matrix::{read_jsonl, write_jsonl};
use serde::{Deserialize, Serialize};

pub const MASTER: &str = "master.jsonl";
pub const BANK: &str = "bank.jsonl";
pub const TEST: &str = "test.jsonl";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const STATIC: &str = "static.jsonl";
pub const TEST_IDS: &str = "test_ids.json";
pub const META: &str = "split.json";
pub const REPORT_JSON: &str = "pipeline_report.json";
pub const REPORT_TXT: &str = "pipeline_report.txt";

/// Static exemplars per language written by `ingest`.
pub const STATIC_PER_LANGUAGE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub seed: u64,
    pub per_language_holdout: BTreeMap<String, usize>,
    pub languages: Vec<String>,
    pub severity_vocabulary: Vec<String>,
}

pub struct SplitDir {
    pub split: BankSplit,
    pub meta: SplitMeta,
}

impl SplitDir {
    pub fn languages(&self) -> Vec<&str> {
        self.meta.languages.iter().map(String::as_str).collect()
    }

    /// Looks an article up on either side of the split.
    pub fn article(&self, article_id: &str) -> Option<&CleanArticle> {
        self.split.all_articles().find(|a| a.article_id == article_id)
    }
}

/// Severity labels seen on problematic articles, sorted.
pub fn observed_vocabulary(articles: &[CleanArticle]) -> Vec<String> {
    let set: BTreeSet<&str> = articles
        .iter()
        .filter(|a| a.label == ArticleLabel::Problematic)
        .filter_map(|a| a.severity.as_deref())
        .collect();
    set.into_iter().map(str::to_string).collect()
}

/// Picks the default B1 exemplars: per language, the first `None` article
/// and the first problematic articles by id, topped up in id order.
pub fn default_static(bank: &[CleanArticle], per_language: usize) -> Vec<ExemplarRecord> {
    let mut by_language: BTreeMap<&str, Vec<&CleanArticle>> = BTreeMap::new();
    for a in bank {
        by_language.entry(&a.language).or_default().push(a);
    }
    let mut out = Vec::new();
    for (_, mut pool) in by_language {
        pool.sort_by(|a, b| a.article_id.cmp(&b.article_id));
        let mut picked: Vec<&CleanArticle> = Vec::new();
        if let Some(none) = pool.iter().find(|a| a.label == ArticleLabel::None) {
            picked.push(none);
        }
        for a in pool.iter().filter(|a| a.label == ArticleLabel::Problematic) {
            if picked.len() >= per_language {
                break;
            }
            picked.push(a);
        }
        for a in &pool {
            if picked.len() >= per_language {
                break;
            }
            if !picked.iter().any(|p| p.article_id == a.article_id) {
                picked.push(a);
            }
        }
        picked.truncate(per_language);
        picked.sort_by(|a, b| a.article_id.cmp(&b.article_id));
        out.extend(picked.into_iter().map(ExemplarRecord::from));
    }
    out
}

pub fn write(
    dir: &Path,
    split: &BankSplit,
    report: &PipelineReport,
    kept: &[AnnotationRecord],
    languages: Vec<String>,
    severity_vocabulary: Vec<String>,
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let master: Vec<&CleanArticle> = split.all_articles().collect();
    write_jsonl(&dir.join(MASTER), &master)?;
    write_jsonl(&dir.join(BANK), &split.bank)?;
    write_jsonl(&dir.join(TEST), &split.test)?;
    write_jsonl(&dir.join(ANNOTATIONS), kept)?;
    write_jsonl(&dir.join(STATIC), &default_static(&split.bank, STATIC_PER_LANGUAGE))?;
    std::fs::write(dir.join(TEST_IDS), serde_json::to_string_pretty(&split.test_ids())? + "\n")?;
    let meta = SplitMeta {
        seed: split.seed,
        per_language_holdout: split.per_language_holdout.clone(),
        languages,
        severity_vocabulary,
    };
    std::fs::write(dir.join(META), serde_json::to_string_pretty(&meta)? + "\n")?;
    std::fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(report)? + "\n")?;
    std::fs::write(dir.join(REPORT_TXT), report.render_text())?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<SplitDir> {
    let meta_path = dir.join(META);
    let meta: SplitMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?,
    )
    .with_context(|| format!("parsing {}", meta_path.display()))?;
    let bank: Vec<CleanArticle> = read_jsonl(&dir.join(BANK)).with_context(|| format!("reading {BANK}"))?;
    let test: Vec<CleanArticle> = read_jsonl(&dir.join(TEST)).with_context(|| format!("reading {TEST}"))?;
    let bank_ids: BTreeSet<&str> = bank.iter().map(|a| a.article_id.as_str()).collect();
    if let Some(a) = test.iter().find(|a| bank_ids.contains(a.article_id.as_str())) {
        bail!("article {} is on both sides of the split", a.article_id);
    }
    Ok(SplitDir {
        split: BankSplit { bank, test, seed: meta.seed, per_language_holdout: meta.per_language_holdout.clone() },
        meta,
    })
}

pub fn read_annotations(dir: &Path) -> Result<Vec<AnnotationRecord>> {
    let path = dir.join(ANNOTATIONS);
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(&path).with_context(|| format!("reading {}", path.display()))
}
