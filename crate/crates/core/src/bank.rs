//! The language-partitioned exemplar bank and same-language top-k retrieval.
//!
//! Retrieval scores every exemplar in the query's language pool by cosine
//! similarity and keeps the best `k`. Ties are broken by ascending
//! `article_id`, and the query's own article is never returned. There is no
//! label filtering and no quota: composition is whatever the ranking gives.
//!
//! # File format
//!
//! ```text
//! {header json}\n
//! {exemplar record json}\n      x count, in (language, article_id) order
//! <count * dimension little-endian f32 values>
//! ```
//!
//! The header carries the build fingerprint (a digest of the provider id,
//! dimension, revision lineage and every exemplar record) and a SHA-256 of
//! the embedding matrix. Both are re-verified on load.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ArticleLabel, BankSplit, CleanArticle, SpanAnnotation};
use crate::embed::{cosine_similarity, EmbedError, Embedder, SimilarityError};
use crate::text::sha256_hex;

pub const BANK_FORMAT: &str = "exbank";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("duplicate article {0} in bank")]
    DuplicateArticle(String),
    #[error("article {0} has a zero-norm embedding")]
    ZeroNormEmbedding(String),
    #[error("article {0} belongs to the held-out test set")]
    ContaminationAttempt(String),
    #[error("corrupt bank: {0}")]
    CorruptBank(String),
    #[error("unsupported bank version {0}")]
    VersionUnsupported(u32),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for BankError {
    fn from(err: std::io::Error) -> Self {
        BankError::Io(err.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("bank has no pool for language {0}")]
    UnknownLanguage(String),
    #[error("no candidate exemplars for language {0}")]
    EmptyLanguagePool(String),
    #[error("k must be positive")]
    InvalidK,
    #[error("bank was built with provider {bank} but {configured} is configured")]
    ProviderMismatch { bank: String, configured: String },
    #[error("query embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("query similarity failed: {0}")]
    Similarity(#[from] SimilarityError),
}

/// The exemplar tuple: text, spans, severity, rationale and metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub article_id: String,
    pub language: String,
    pub text: String,
    pub label: ArticleLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
    #[serde(default)]
    pub spans: Vec<SpanAnnotation>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl From<&CleanArticle> for ExemplarRecord {
    fn from(a: &CleanArticle) -> Self {
        let none = a.label == ArticleLabel::None;
        let mut metadata = a.metadata.clone();
        metadata.insert("source_record_id".into(), a.source_record_id.clone());
        Self {
            article_id: a.article_id.clone(),
            language: a.language.clone(),
            text: a.article_text.clone(),
            label: a.label,
            severity: if none { None } else { a.severity.clone() },
            spans: if none { Vec::new() } else { a.spans.clone() },
            rationale: if none { String::new() } else { a.rationale.clone() },
            metadata,
        }
    }
}

impl ExemplarRecord {
    pub fn span_texts(&self) -> Vec<String> {
        self.spans.iter().map(|s| s.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub record: ExemplarRecord,
    pub embedding: Vec<f32>,
}

/// Immutable, language-partitioned exemplar store.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarBank {
    provider_id: String,
    dimension: usize,
    revision: u32,
    parent_fingerprint: Option<String>,
    fingerprint: String,
    pools: BTreeMap<String, Vec<Exemplar>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    format: String,
    version: u32,
    provider_id: String,
    dimension: usize,
    revision: u32,
    #[serde(default)]
    parent_fingerprint: Option<String>,
    count: usize,
    fingerprint: String,
    matrix_sha256: String,
}

impl ExemplarBank {
    /// Embeds `records` and builds revision 0 of a bank.
    ///
    /// Any record whose `article_id` is in `excluded` is a contamination
    /// attempt.
    pub fn build(
        records: Vec<ExemplarRecord>,
        embedder: &Embedder,
        excluded: &BTreeSet<String>,
    ) -> Result<Self, BankError> {
        Self::build_revision(records, embedder, excluded, 0, None)
    }

    /// Builds the bank side of a split, guarding against its test side.
    pub fn from_split(split: &BankSplit, embedder: &Embedder) -> Result<Self, BankError> {
        let records = split.bank.iter().map(ExemplarRecord::from).collect();
        Self::build(records, embedder, &split.test_ids())
    }

    fn build_revision(
        mut records: Vec<ExemplarRecord>,
        embedder: &Embedder,
        excluded: &BTreeSet<String>,
        revision: u32,
        parent_fingerprint: Option<String>,
    ) -> Result<Self, BankError> {
        records.sort_by(|a, b| (&a.language, &a.article_id).cmp(&(&b.language, &b.article_id)));
        let mut seen = BTreeSet::new();
        for r in &records {
            if excluded.contains(&r.article_id) {
                return Err(BankError::ContaminationAttempt(r.article_id.clone()));
            }
            if !seen.insert(r.article_id.clone()) {
                return Err(BankError::DuplicateArticle(r.article_id.clone()));
            }
        }

        let embeddings = if records.is_empty() {
            Vec::new()
        } else {
            let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
            embedder.embed_batch(&texts)?
        };
        let mut pools: BTreeMap<String, Vec<Exemplar>> = BTreeMap::new();
        for (record, embedding) in records.into_iter().zip(embeddings) {
            if embedding.iter().all(|x| *x == 0.0) {
                return Err(BankError::ZeroNormEmbedding(record.article_id));
            }
            pools.entry(record.language.clone()).or_default().push(Exemplar { record, embedding });
        }

        let mut bank = Self {
            provider_id: embedder.provider_id().to_string(),
            dimension: embedder.dimension(),
            revision,
            parent_fingerprint,
            fingerprint: String::new(),
            pools,
        };
        bank.fingerprint = bank.compute_fingerprint();
        Ok(bank)
    }

    /// Produces the next bank revision with `admitted` records added.
    ///
    /// An admitted record for an article already in the bank replaces it. The
    /// receiver is left untouched; the new bank has a fresh fingerprint that
    /// depends only on its contents and lineage, so rebuilding with the same
    /// admissions is reproducible.
    pub fn with_admissions(
        &self,
        admitted: Vec<ExemplarRecord>,
        embedder: &Embedder,
        test_ids: &BTreeSet<String>,
    ) -> Result<Self, BankError> {
        self.check_provider(embedder.provider_id())?;
        let mut seen = BTreeSet::new();
        for r in &admitted {
            if test_ids.contains(&r.article_id) {
                return Err(BankError::ContaminationAttempt(r.article_id.clone()));
            }
            if !seen.insert(r.article_id.clone()) {
                return Err(BankError::DuplicateArticle(r.article_id.clone()));
            }
        }
        let mut records: Vec<ExemplarRecord> =
            self.iter().filter(|e| !seen.contains(&e.record.article_id)).map(|e| e.record.clone()).collect();
        records.extend(admitted);
        Self::build_revision(records, embedder, test_ids, self.revision + 1, Some(self.fingerprint.clone()))
    }

    fn compute_fingerprint(&self) -> String {
        let mut material = serde_json::json!({
            "provider_id": self.provider_id,
            "dimension": self.dimension,
            "revision": self.revision,
            "parent_fingerprint": self.parent_fingerprint,
        })
        .to_string();
        for exemplar in self.iter() {
            material.push('\n');
            material.push_str(&serde_json::to_string(&exemplar.record).expect("record serializes"));
        }
        sha256_hex(material.as_bytes())
    }

    fn matrix_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.len() * self.dimension * 4);
        for exemplar in self.iter() {
            for value in &exemplar.embedding {
                bytes.extend_from_slice(&value.to_le_bytes());
            }
        }
        bytes
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn revision(&self) -> u32 {
        self.revision
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn parent_fingerprint(&self) -> Option<&str> {
        self.parent_fingerprint.as_deref()
    }

    pub fn len(&self) -> usize {
        self.pools.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.pools.keys().map(String::as_str)
    }

    pub fn pool(&self, language: &str) -> Option<&[Exemplar]> {
        self.pools.get(language).map(Vec::as_slice)
    }

    /// All exemplars in `(language, article_id)` order.
    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.pools.values().flatten()
    }

    pub fn get(&self, article_id: &str) -> Option<&Exemplar> {
        self.iter().find(|e| e.record.article_id == article_id)
    }

    pub fn check_provider(&self, configured: &str) -> Result<(), BankError> {
        if configured != self.provider_id {
            return Err(BankError::CorruptBank(format!(
                "fingerprint mismatch: bank built with provider {:?}, configured {configured:?}",
                self.provider_id
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), BankError> {
        let header = BankHeader {
            format: BANK_FORMAT.into(),
            version: BANK_VERSION,
            provider_id: self.provider_id.clone(),
            dimension: self.dimension,
            revision: self.revision,
            parent_fingerprint: self.parent_fingerprint.clone(),
            count: self.len(),
            fingerprint: self.fingerprint.clone(),
            matrix_sha256: sha256_hex(&self.matrix_bytes()),
        };
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for exemplar in self.iter() {
            serde_json::to_writer(&mut out, &exemplar.record).expect("record serializes");
            out.push(b'\n');
        }
        out.extend_from_slice(&self.matrix_bytes());

        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&out)?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BankError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Loads a bank and checks it was built by the configured provider.
    pub fn load_for_provider(path: &Path, provider_id: &str) -> Result<Self, BankError> {
        let bank = Self::load(path)?;
        bank.check_provider(provider_id)?;
        Ok(bank)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BankError> {
        let corrupt = |msg: &str| BankError::CorruptBank(msg.to_string());
        let mut cursor = 0usize;
        let mut next_line = |what: &str| -> Result<&[u8], BankError> {
            let rest = &bytes[cursor..];
            let end =
                rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt(&format!("truncated before {what}")))?;
            cursor += end + 1;
            Ok(&rest[..end])
        };

        let header: BankHeader =
            serde_json::from_slice(next_line("header")?).map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
        if header.format != BANK_FORMAT {
            return Err(corrupt("not an exemplar bank file"));
        }
        if header.version != BANK_VERSION {
            return Err(BankError::VersionUnsupported(header.version));
        }

        let mut records = Vec::with_capacity(header.count);
        for i in 0..header.count {
            let line = next_line(&format!("record {i}"))?;
            let record: ExemplarRecord =
                serde_json::from_slice(line).map_err(|e| corrupt(&format!("unreadable record {i}: {e}")))?;
            records.push(record);
        }

        let matrix = &bytes[cursor..];
        let expected_len = header.count * header.dimension * 4;
        if matrix.len() != expected_len {
            return Err(corrupt(&format!("embedding matrix has {} bytes, expected {expected_len}", matrix.len())));
        }
        if sha256_hex(matrix) != header.matrix_sha256 {
            return Err(corrupt("embedding matrix checksum mismatch"));
        }

        let mut pools: BTreeMap<String, Vec<Exemplar>> = BTreeMap::new();
        let row_bytes = header.dimension * 4;
        for (i, record) in records.into_iter().enumerate() {
            let row = &matrix[i * row_bytes..(i + 1) * row_bytes];
            let embedding = row.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            pools.entry(record.language.clone()).or_default().push(Exemplar { record, embedding });
        }

        let bank = Self {
            provider_id: header.provider_id,
            dimension: header.dimension,
            revision: header.revision,
            parent_fingerprint: header.parent_fingerprint,
            fingerprint: header.fingerprint,
            pools,
        };
        if bank.compute_fingerprint() != bank.fingerprint {
            return Err(corrupt("fingerprint mismatch"));
        }
        Ok(bank)
    }
}

// ---------------------------------------------------------------------------
// Retrieval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub exemplar: ExemplarRecord,
    pub score: f64,
}

/// Ranked top-k references for one query article.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_article_id: String,
    pub language: String,
    pub k_requested: usize,
    pub hits: Vec<RetrievalHit>,
    /// Fewer than `k_requested` candidates were available.
    pub shortfall: bool,
}

impl RetrievalResult {
    pub fn k_returned(&self) -> usize {
        self.hits.len()
    }

    pub fn article_ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.exemplar.article_id.clone()).collect()
    }
}

/// Retrieves the `k` most similar same-language exemplars for `query`.
pub fn retrieve(
    query: &CleanArticle,
    bank: &ExemplarBank,
    embedder: &Embedder,
    k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if embedder.provider_id() != bank.provider_id() {
        return Err(RetrievalError::ProviderMismatch {
            bank: bank.provider_id().to_string(),
            configured: embedder.provider_id().to_string(),
        });
    }
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if bank.pool(&query.language).is_none() {
        return Err(RetrievalError::UnknownLanguage(query.language.clone()));
    }
    let vector = embedder.embed_one(&query.article_text)?;
    retrieve_by_vector(bank, &query.article_id, &query.language, &vector, k)
}

/// Ranks the language pool against a precomputed query vector.
pub fn retrieve_by_vector(
    bank: &ExemplarBank,
    query_article_id: &str,
    language: &str,
    query_vector: &[f32],
    k: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let pool = bank.pool(language).ok_or_else(|| RetrievalError::UnknownLanguage(language.to_string()))?;

    let mut scored = Vec::with_capacity(pool.len());
    for exemplar in pool.iter().filter(|e| e.record.article_id != query_article_id) {
        let score = cosine_similarity(query_vector, &exemplar.embedding)?;
        scored.push((score, exemplar));
    }
    if scored.is_empty() {
        return Err(RetrievalError::EmptyLanguagePool(language.to_string()));
    }
    scored.sort_by(|(sa, ea), (sb, eb)| sb.total_cmp(sa).then_with(|| ea.record.article_id.cmp(&eb.record.article_id)));

    let shortfall = scored.len() < k;
    let hits =
        scored.into_iter().take(k).map(|(score, e)| RetrievalHit { exemplar: e.record.clone(), score }).collect();
    Ok(RetrievalResult {
        query_article_id: query_article_id.to_string(),
        language: language.to_string(),
        k_requested: k,
        hits,
        shortfall,
    })
}
