//! Multi-annotator corpus ingestion and the article-level cleaning pipeline.
//!
//! Raw annotation rows go through four steps, in order:
//!
//! 1. [`filter_unusable`] drops `NA` rows and `Problematic` rows that cannot
//!    support prompting (no valid severity, no span, or no rationale).
//! 2. [`exclude_binary_conflicts`] drops every article on which annotators
//!    disagree about `None` versus `Problematic`.
//! 3. [`resolve_severity_conflicts`] collapses each surviving article to one
//!    [`CleanArticle`]; among `Problematic` annotations the longest rationale
//!    wins, measured in code points after NFC, ties going to the smallest
//!    `record_id`.
//! 4. [`split_bank_test`] samples a per-language held-out test set and puts
//!    the remainder in the retrieval bank.
//!
//! [`build_master_table`] composes all four and returns a [`PipelineReport`].

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{char_slice, nfc, nfc_len, sha256_hex};

/// The label literal used for unproblematic items everywhere in the pipeline.
pub const NONE_LABEL: &str = "None";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngestError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("record {record_id}: span offset out of range")]
    OffsetOutOfRange { record_id: String },
    #[error("record {record_id}: span {index} does not match the article slice")]
    SpanTextMismatch { record_id: String, index: usize },
    #[error("line {line}: duplicate record_id {record_id}")]
    DuplicateRecordId { record_id: String, line: usize },
    #[error("empty annotation group")]
    EmptyGroup,
    #[error("article {0} mixes None and Problematic annotations")]
    BinaryConflict(String),
    #[error("insufficient articles for {language}: have {have}, need {need}")]
    InsufficientArticles { language: String, have: usize, need: usize },
    #[error("invalid corpus format: {0}")]
    InvalidFormat(String),
}

/// Raw annotation label as written by an annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    None,
    Problematic,
    #[serde(rename = "NA")]
    NotApplicable,
}

/// Label of a cleaned article. `NA` never survives filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArticleLabel {
    None,
    Problematic,
}

impl ArticleLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ArticleLabel::None => NONE_LABEL,
            ArticleLabel::Problematic => "Problematic",
        }
    }
}

/// Half-open `[start, end)` code-point range into NFC article text.
pub type CharRange = [usize; 2];

/// One annotator's judgment of one article.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub record_id: String,
    pub article_id: String,
    pub language: String,
    pub article_text: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_text: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_offsets: Option<Vec<CharRange>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub annotator_id: String,
    #[serde(default)]
    pub annotator_meta: BTreeMap<String, String>,
}

impl AnnotationRecord {
    fn has_span(&self) -> bool {
        self.span_text.as_ref().is_some_and(|spans| spans.iter().any(|s| !s.trim().is_empty()))
    }

    fn has_rationale(&self) -> bool {
        self.rationale.as_ref().is_some_and(|r| !r.trim().is_empty())
    }

    fn rationale_len(&self) -> usize {
        self.rationale.as_deref().map(nfc_len).unwrap_or(0)
    }
}

/// A problematic excerpt: surface text plus its offsets when known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<CharRange>,
}

/// The single article-level reference produced by the cleaning pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanArticle {
    pub article_id: String,
    pub language: String,
    pub article_text: String,
    pub label: ArticleLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
    #[serde(default)]
    pub spans: Vec<SpanAnnotation>,
    #[serde(default)]
    pub rationale: String,
    pub source_record_id: String,
    #[serde(default)]
    pub rejected_record_ids: Vec<String>,
    /// Winning annotator's id and metadata, kept for subgroup analysis.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl CleanArticle {
    /// Severity as a scoring label: the severity for problematic articles,
    /// [`NONE_LABEL`] otherwise.
    pub fn severity_label(&self) -> &str {
        match self.label {
            ArticleLabel::None => NONE_LABEL,
            ArticleLabel::Problematic => self.severity.as_deref().unwrap_or(NONE_LABEL),
        }
    }

    pub fn span_texts(&self) -> Vec<String> {
        self.spans.iter().map(|s| s.text.clone()).collect()
    }

    /// Re-serializes the article as the single annotation that produced it.
    pub fn to_annotation_record(&self) -> AnnotationRecord {
        let mut meta = self.metadata.clone();
        let annotator_id = meta.remove("annotator_id").unwrap_or_default();
        let problematic = self.label == ArticleLabel::Problematic;
        let offsets: Option<Vec<CharRange>> = self.spans.iter().map(|s| s.range).collect();
        AnnotationRecord {
            record_id: self.source_record_id.clone(),
            article_id: self.article_id.clone(),
            language: self.language.clone(),
            article_text: self.article_text.clone(),
            label: match self.label {
                ArticleLabel::None => Label::None,
                ArticleLabel::Problematic => Label::Problematic,
            },
            severity: self.severity.clone(),
            span_text: problematic.then(|| self.span_texts()),
            span_offsets: if problematic { offsets } else { None },
            rationale: problematic.then(|| self.rationale.clone()),
            annotator_id,
            annotator_meta: meta,
        }
    }
}

/// Held-out test set and retrieval bank, disjoint by `article_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSplit {
    pub bank: Vec<CleanArticle>,
    pub test: Vec<CleanArticle>,
    pub seed: u64,
    pub per_language_holdout: BTreeMap<String, usize>,
}

impl BankSplit {
    pub fn test_ids(&self) -> BTreeSet<String> {
        self.test.iter().map(|a| a.article_id.clone()).collect()
    }

    pub fn all_articles(&self) -> impl Iterator<Item = &CleanArticle> {
        self.bank.iter().chain(self.test.iter())
    }
}

// ---------------------------------------------------------------------------
// Format configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusLayout {
    /// One JSON object per line.
    #[default]
    Jsonl,
    /// Delimited text with a header row.
    Delimited,
}

/// Column (delimited) or key (JSONL) names for each record field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldNames {
    pub record_id: String,
    pub article_id: String,
    pub language: String,
    pub article_text: String,
    pub label: String,
    pub severity: String,
    pub span_text: String,
    pub span_offsets: String,
    pub rationale: String,
    pub annotator_id: String,
    pub annotator_meta: String,
}

impl Default for FieldNames {
    fn default() -> Self {
        Self {
            record_id: "record_id".into(),
            article_id: "article_id".into(),
            language: "language".into(),
            article_text: "article_text".into(),
            label: "label".into(),
            severity: "severity".into(),
            span_text: "span_text".into(),
            span_offsets: "span_offsets".into(),
            rationale: "rationale".into(),
            annotator_id: "annotator_id".into(),
            annotator_meta: "annotator_meta".into(),
        }
    }
}

/// Surface strings accepted for each label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelValues {
    pub none: Vec<String>,
    pub problematic: Vec<String>,
    pub not_applicable: Vec<String>,
}

impl Default for LabelValues {
    fn default() -> Self {
        Self {
            none: vec!["None".into()],
            problematic: vec!["Problematic".into()],
            not_applicable: vec!["NA".into(), "N/A".into()],
        }
    }
}

/// Declares how a raw corpus file is laid out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusFormat {
    pub layout: CorpusLayout,
    pub delimiter: char,
    /// Separates list items inside one delimited cell.
    pub list_separator: String,
    pub fields: FieldNames,
    /// Extra delimited columns (or top-level JSON keys) folded into `annotator_meta`.
    pub meta_fields: Vec<String>,
    pub labels: LabelValues,
    pub languages: Vec<String>,
    /// Accepted severity labels. Empty accepts any non-blank severity.
    pub severity_vocabulary: Vec<String>,
}

impl Default for CorpusFormat {
    fn default() -> Self {
        Self {
            layout: CorpusLayout::Jsonl,
            delimiter: ',',
            list_separator: "||".into(),
            fields: FieldNames::default(),
            meta_fields: Vec::new(),
            labels: LabelValues::default(),
            languages: vec!["fa".into(), "it".into()],
            severity_vocabulary: Vec::new(),
        }
    }
}

impl CorpusFormat {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.severity_vocabulary.iter().any(|s| s == NONE_LABEL) {
            return Err(IngestError::InvalidFormat(format!(
                "severity vocabulary must not contain the reserved label {NONE_LABEL:?}"
            )));
        }
        if self.layout == CorpusLayout::Delimited && !self.delimiter.is_ascii() {
            return Err(IngestError::InvalidFormat("delimiter must be ASCII".into()));
        }
        if self.list_separator.is_empty() {
            return Err(IngestError::InvalidFormat("list_separator is empty".into()));
        }
        Ok(())
    }

    pub fn accepts_severity(&self, severity: &str) -> bool {
        let severity = severity.trim();
        !severity.is_empty()
            && (self.severity_vocabulary.is_empty() || self.severity_vocabulary.iter().any(|s| s == severity))
    }

    fn label_from(&self, raw: &str) -> Option<Label> {
        let raw = raw.trim();
        if self.labels.none.iter().any(|v| v == raw) {
            Some(Label::None)
        } else if self.labels.problematic.iter().any(|v| v == raw) {
            Some(Label::Problematic)
        } else if self.labels.not_applicable.iter().any(|v| v == raw) {
            Some(Label::NotApplicable)
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing

/// Records parsed from a corpus plus one diagnostic per unusable row.
#[derive(Debug, Default, Clone)]
pub struct ParsedCorpus {
    pub records: Vec<AnnotationRecord>,
    pub diagnostics: Vec<IngestError>,
}

/// Parses a corpus, failing on the first diagnostic.
pub fn parse_annotations(raw: &[u8], format: &CorpusFormat) -> Result<Vec<AnnotationRecord>, IngestError> {
    let parsed = parse_annotations_lenient(raw, format)?;
    match parsed.diagnostics.into_iter().next() {
        Some(err) => Err(err),
        None => Ok(parsed.records),
    }
}

/// Parses a corpus, collecting a positioned diagnostic for every bad row.
pub fn parse_annotations_lenient(raw: &[u8], format: &CorpusFormat) -> Result<ParsedCorpus, IngestError> {
    format.validate()?;
    let rows: Box<dyn Iterator<Item = RowResult>> = match format.layout {
        CorpusLayout::Jsonl => Box::new(jsonl_rows(raw, format)),
        CorpusLayout::Delimited => delimited_rows(raw, format),
    };

    let mut out = ParsedCorpus::default();
    let mut seen = HashSet::new();
    for row in rows {
        match row.and_then(|(line, fields)| fields.into_record(line, format).map(|r| (line, r))) {
            Ok((line, record)) => {
                if !seen.insert(record.record_id.clone()) {
                    out.diagnostics.push(IngestError::DuplicateRecordId { record_id: record.record_id, line });
                } else {
                    out.records.push(record);
                }
            }
            Err(err) => out.diagnostics.push(err),
        }
    }
    Ok(out)
}

/// Field values pulled out of one row before validation.
#[derive(Default)]
struct RawFields {
    record_id: Option<String>,
    article_id: Option<String>,
    language: Option<String>,
    article_text: Option<String>,
    label: Option<String>,
    severity: Option<String>,
    span_text: Option<Vec<String>>,
    span_offsets: Option<Vec<CharRange>>,
    rationale: Option<String>,
    annotator_id: Option<String>,
    annotator_meta: BTreeMap<String, String>,
}

fn malformed(line: usize, reason: impl Into<String>) -> IngestError {
    IngestError::MalformedRow { line, reason: reason.into() }
}

fn non_blank(value: Option<String>) -> Option<String> {
    value.filter(|v| !v.trim().is_empty())
}

impl RawFields {
    fn into_record(self, line: usize, format: &CorpusFormat) -> Result<AnnotationRecord, IngestError> {
        let f = &format.fields;
        let required = |v: Option<String>, name: &str| {
            non_blank(v).ok_or_else(|| malformed(line, format!("missing required field {name:?}")))
        };
        let record_id = required(self.record_id, &f.record_id)?;
        let article_id = required(self.article_id, &f.article_id)?;
        let language = required(self.language, &f.language)?.trim().to_string();
        let article_text = nfc(&required(self.article_text, &f.article_text)?);
        let raw_label = required(self.label, &f.label)?;
        let annotator_id = required(self.annotator_id, &f.annotator_id)?;

        if !format.languages.is_empty() && !format.languages.contains(&language) {
            return Err(malformed(line, format!("unsupported language {language:?}")));
        }
        let label =
            format.label_from(&raw_label).ok_or_else(|| malformed(line, format!("unknown label {raw_label:?}")))?;

        let mut span_text = self
            .span_text
            .map(|spans| spans.iter().map(|s| nfc(s)).collect::<Vec<_>>())
            .filter(|spans| !spans.is_empty());
        let span_offsets = self.span_offsets.filter(|o| !o.is_empty());

        if let Some(offsets) = &span_offsets {
            let text_len = article_text.chars().count();
            if let Some(texts) = &span_text {
                if texts.len() != offsets.len() {
                    return Err(malformed(
                        line,
                        format!("{} span texts but {} offset pairs", texts.len(), offsets.len()),
                    ));
                }
            }
            let mut derived = Vec::with_capacity(offsets.len());
            for (index, &[start, end]) in offsets.iter().enumerate() {
                if start >= end || end > text_len {
                    return Err(IngestError::OffsetOutOfRange { record_id });
                }
                let slice = char_slice(&article_text, start, end)
                    .ok_or_else(|| IngestError::OffsetOutOfRange { record_id: record_id.clone() })?;
                if let Some(texts) = &span_text {
                    if texts[index] != slice {
                        return Err(IngestError::SpanTextMismatch { record_id, index });
                    }
                }
                derived.push(slice.to_string());
            }
            span_text.get_or_insert(derived);
        }

        Ok(AnnotationRecord {
            record_id,
            article_id,
            language,
            article_text,
            label,
            severity: non_blank(self.severity).map(|s| s.trim().to_string()),
            span_text,
            span_offsets,
            rationale: non_blank(self.rationale).map(|r| nfc(&r)),
            annotator_id,
            annotator_meta: self.annotator_meta,
        })
    }
}

type RowResult = Result<(usize, RawFields), IngestError>;

fn jsonl_rows<'a>(raw: &'a [u8], format: &'a CorpusFormat) -> impl Iterator<Item = RowResult> + 'a {
    raw.split(|&b| b == b'\n').enumerate().filter_map(move |(idx, bytes)| {
        let line = idx + 1;
        let text = match std::str::from_utf8(bytes) {
            Ok(t) => t.trim(),
            Err(_) => return Some(Err(malformed(line, "invalid UTF-8"))),
        };
        if text.is_empty() {
            return None;
        }
        Some(jsonl_fields(line, text, format).map(|f| (line, f)))
    })
}

fn json_string(line: usize, value: Option<&serde_json::Value>, name: &str) -> Result<Option<String>, IngestError> {
    match value {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
        Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
        Some(_) => Err(malformed(line, format!("field {name:?} must be a string"))),
    }
}

fn jsonl_fields(line: usize, text: &str, format: &CorpusFormat) -> Result<RawFields, IngestError> {
    use serde_json::Value;
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(line, e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| malformed(line, "row is not a JSON object"))?;
    let f = &format.fields;
    let get = |name: &str| json_string(line, obj.get(name), name);

    let span_text = match obj.get(&f.span_text) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(vec![s.clone()]),
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| {
                    v.as_str().map(str::to_string).ok_or_else(|| malformed(line, "span_text items must be strings"))
                })
                .collect::<Result<_, _>>()?,
        ),
        Some(_) => return Err(malformed(line, "span_text must be a string or list")),
    };
    let span_offsets = match obj.get(&f.span_offsets) {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<Vec<CharRange>>(v.clone())
                .map_err(|_| malformed(line, "span_offsets must be a list of [start, end] pairs"))?,
        ),
    };
    let mut annotator_meta = BTreeMap::new();
    if let Some(meta) = obj.get(&f.annotator_meta) {
        match meta {
            Value::Null => {}
            Value::Object(m) => {
                for (k, v) in m {
                    if let Some(s) = json_string(line, Some(v), k)? {
                        annotator_meta.insert(k.clone(), s);
                    }
                }
            }
            _ => return Err(malformed(line, "annotator_meta must be an object")),
        }
    }
    for key in &format.meta_fields {
        if let Some(s) = get(key)? {
            annotator_meta.insert(key.clone(), s);
        }
    }

    Ok(RawFields {
        record_id: get(&f.record_id)?,
        article_id: get(&f.article_id)?,
        language: get(&f.language)?,
        article_text: get(&f.article_text)?,
        label: get(&f.label)?,
        severity: get(&f.severity)?,
        span_text,
        span_offsets,
        rationale: get(&f.rationale)?,
        annotator_id: get(&f.annotator_id)?,
        annotator_meta,
    })
}

fn parse_offsets(line: usize, cell: &str, separator: &str) -> Result<Vec<CharRange>, IngestError> {
    cell.split(separator)
        .map(|pair| {
            let (start, end) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| malformed(line, format!("offset pair {pair:?} is not start:end")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| malformed(line, format!("offset {s:?} is not a non-negative integer")))
            };
            Ok([parse(start)?, parse(end)?])
        })
        .collect()
}

fn delimited_rows<'a>(raw: &'a [u8], format: &'a CorpusFormat) -> Box<dyn Iterator<Item = RowResult> + 'a> {
    if raw.iter().all(u8::is_ascii_whitespace) {
        return Box::new(std::iter::empty());
    }
    let mut reader = csv::ReaderBuilder::new().delimiter(format.delimiter as u8).flexible(false).from_reader(raw);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Box::new(std::iter::once(Err(malformed(1, e.to_string())))),
    };
    let column = move |name: &str| headers.iter().position(|h| h.trim() == name);
    let f = &format.fields;
    let columns = [
        column(&f.record_id),
        column(&f.article_id),
        column(&f.language),
        column(&f.article_text),
        column(&f.label),
        column(&f.severity),
        column(&f.span_text),
        column(&f.span_offsets),
        column(&f.rationale),
        column(&f.annotator_id),
    ];
    let meta_columns: Vec<(String, Option<usize>)> =
        format.meta_fields.iter().map(|m| (m.clone(), column(m))).collect();

    Box::new(reader.into_records().map(move |row| {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            malformed(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell =
            |idx: Option<usize>| idx.and_then(|i| row.get(i)).map(str::to_string).filter(|s| !s.trim().is_empty());
        let sep = format.list_separator.as_str();
        let span_text = cell(columns[6]).map(|c| c.split(sep).map(|s| s.to_string()).collect());
        let span_offsets = cell(columns[7]).map(|c| parse_offsets(line, &c, sep)).transpose()?;
        let annotator_meta =
            meta_columns.iter().filter_map(|(name, idx)| cell(*idx).map(|v| (name.clone(), v))).collect();
        Ok((
            line,
            RawFields {
                record_id: cell(columns[0]),
                article_id: cell(columns[1]),
                language: cell(columns[2]),
                article_text: cell(columns[3]),
                label: cell(columns[4]),
                severity: cell(columns[5]),
                span_text,
                span_offsets,
                rationale: cell(columns[8]),
                annotator_id: cell(columns[9]),
                annotator_meta,
            },
        ))
    }))
}

// ---------------------------------------------------------------------------
// Cleaning steps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    NotApplicable,
    MissingSeverity,
    InvalidSeverity,
    MissingSpan,
    MissingRationale,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<AnnotationRecord>,
    pub rejected: Vec<(AnnotationRecord, RejectReason)>,
}

/// Step 1. Rejection is data: every record ends up in exactly one list.
///
/// A `Problematic` record failing several checks is rejected with the first
/// failing reason in the order severity, span, rationale.
pub fn filter_unusable(records: Vec<AnnotationRecord>, format: &CorpusFormat) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for record in records {
        let reason = match record.label {
            Label::NotApplicable => Some(RejectReason::NotApplicable),
            Label::None => None,
            Label::Problematic => match record.severity.as_deref() {
                None => Some(RejectReason::MissingSeverity),
                Some(sev) if !format.accepts_severity(sev) => Some(RejectReason::InvalidSeverity),
                Some(_) if !record.has_span() => Some(RejectReason::MissingSpan),
                Some(_) if !record.has_rationale() => Some(RejectReason::MissingRationale),
                Some(_) => None,
            },
        };
        match reason {
            Some(reason) => out.rejected.push((record, reason)),
            None => out.kept.push(record),
        }
    }
    out
}

/// Groups records by `article_id`, each group ordered by `record_id`.
pub fn group_by_article(records: Vec<AnnotationRecord>) -> BTreeMap<String, Vec<AnnotationRecord>> {
    let mut groups: BTreeMap<String, Vec<AnnotationRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(record.article_id.clone()).or_default().push(record);
    }
    for group in groups.values_mut() {
        group.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    }
    groups
}

/// Step 2. Removes articles carrying both `None` and `Problematic` labels.
pub fn exclude_binary_conflicts(
    groups: BTreeMap<String, Vec<AnnotationRecord>>,
) -> (BTreeMap<String, Vec<AnnotationRecord>>, Vec<String>) {
    let mut surviving = BTreeMap::new();
    let mut excluded = Vec::new();
    for (article_id, group) in groups {
        let has_none = group.iter().any(|r| r.label == Label::None);
        let has_problematic = group.iter().any(|r| r.label == Label::Problematic);
        if has_none && has_problematic {
            excluded.push(article_id);
        } else {
            surviving.insert(article_id, group);
        }
    }
    (surviving, excluded)
}

/// Step 3. Collapses one conflict-free group to its article-level reference.
pub fn resolve_severity_conflicts(group: &[AnnotationRecord]) -> Result<CleanArticle, IngestError> {
    let first = group.first().ok_or(IngestError::EmptyGroup)?;
    let all_none = group.iter().all(|r| r.label == Label::None);
    let all_problematic = group.iter().all(|r| r.label == Label::Problematic);
    if !all_none && !all_problematic {
        return Err(IngestError::BinaryConflict(first.article_id.clone()));
    }

    let winner = if all_none {
        group.iter().min_by(|a, b| a.record_id.cmp(&b.record_id))
    } else {
        // longest rationale, then smallest record_id
        group
            .iter()
            .min_by(|a, b| b.rationale_len().cmp(&a.rationale_len()).then_with(|| a.record_id.cmp(&b.record_id)))
    }
    .expect("group is non-empty");

    let mut rejected_record_ids: Vec<String> =
        group.iter().filter(|r| r.record_id != winner.record_id).map(|r| r.record_id.clone()).collect();
    rejected_record_ids.sort();

    let mut metadata = winner.annotator_meta.clone();
    metadata.insert("annotator_id".into(), winner.annotator_id.clone());

    let (label, severity, spans, rationale) = if all_none {
        (ArticleLabel::None, None, Vec::new(), String::new())
    } else {
        let texts = winner.span_text.clone().unwrap_or_default();
        let spans = texts
            .into_iter()
            .enumerate()
            .filter(|(_, t)| !t.trim().is_empty())
            .map(|(i, text)| SpanAnnotation {
                text,
                range: winner.span_offsets.as_ref().and_then(|o| o.get(i).copied()),
            })
            .collect();
        (ArticleLabel::Problematic, winner.severity.clone(), spans, winner.rationale.clone().unwrap_or_default())
    };

    Ok(CleanArticle {
        article_id: winner.article_id.clone(),
        language: winner.language.clone(),
        article_text: winner.article_text.clone(),
        label,
        severity,
        spans,
        rationale,
        source_record_id: winner.record_id.clone(),
        rejected_record_ids,
        metadata,
    })
}

fn language_seed(seed: u64, language: &str) -> u64 {
    let mut material = seed.to_le_bytes().to_vec();
    material.extend_from_slice(language.as_bytes());
    let digest = sha256_hex(&material);
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Step 4. Samples `holdout[language]` test articles per language.
///
/// Each language draws from its own generator seeded from `(seed, language)`,
/// so adding a language leaves the other languages' splits unchanged.
/// Languages absent from `holdout` go entirely to the bank.
pub fn split_bank_test(
    articles: Vec<CleanArticle>,
    holdout: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<BankSplit, IngestError> {
    let mut by_language: BTreeMap<String, Vec<CleanArticle>> = BTreeMap::new();
    for article in articles {
        by_language.entry(article.language.clone()).or_default().push(article);
    }
    for (language, &need) in holdout {
        let have = by_language.get(language).map_or(0, Vec::len);
        if have < need {
            return Err(IngestError::InsufficientArticles { language: language.clone(), have, need });
        }
    }

    let mut bank = Vec::new();
    let mut test = Vec::new();
    for (language, mut pool) in by_language {
        pool.sort_by(|a, b| a.article_id.cmp(&b.article_id));
        let need = holdout.get(&language).copied().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(language_seed(seed, &language));
        let picked: BTreeSet<usize> = rand::seq::index::sample(&mut rng, pool.len(), need).into_iter().collect();
        for (idx, article) in pool.into_iter().enumerate() {
            if picked.contains(&idx) {
                test.push(article);
            } else {
                bank.push(article);
            }
        }
    }

    Ok(BankSplit { bank, test, seed, per_language_holdout: holdout.clone() })
}

// ---------------------------------------------------------------------------
// Composition and reporting

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCounts {
    pub none: usize,
    pub problematic: usize,
    pub bank: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub records_total: usize,
    pub records_kept: usize,
    pub rejected_by_reason: BTreeMap<RejectReason, usize>,
    pub articles_total: usize,
    pub excluded_binary_conflicts: Vec<String>,
    /// Articles with two or more `Problematic` annotations resolved by rationale length.
    pub severity_conflicts_resolved: usize,
    /// Articles with two or more `None` annotations collapsed to one.
    pub none_groups_collapsed: usize,
    pub per_language: BTreeMap<String, LanguageCounts>,
}

impl PipelineReport {
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "records: {} total, {} kept", self.records_total, self.records_kept);
        for (reason, count) in &self.rejected_by_reason {
            let pct = if self.records_total == 0 { 0.0 } else { 100.0 * *count as f64 / self.records_total as f64 };
            let _ = writeln!(s, "  rejected {reason:?}: {count} ({pct:.1}%)");
        }
        let _ = writeln!(s, "articles: {} with usable annotations", self.articles_total);
        let _ = writeln!(s, "  excluded (binary conflict): {}", self.excluded_binary_conflicts.len());
        let _ = writeln!(s, "  severity conflicts resolved: {}", self.severity_conflicts_resolved);
        let _ = writeln!(s, "  None groups collapsed: {}", self.none_groups_collapsed);
        let _ = writeln!(s, "language  none  problematic  bank  test");
        for (lang, c) in &self.per_language {
            let _ = writeln!(s, "{lang:<8}  {:>4}  {:>11}  {:>4}  {:>4}", c.none, c.problematic, c.bank, c.test);
        }
        s
    }
}

/// Steps 1-3: records to one clean article per surviving `article_id`.
pub fn clean_articles(
    records: Vec<AnnotationRecord>,
    format: &CorpusFormat,
) -> Result<(Vec<CleanArticle>, PipelineReport), IngestError> {
    let mut report = PipelineReport { records_total: records.len(), ..Default::default() };
    let filtered = filter_unusable(records, format);
    report.records_kept = filtered.kept.len();
    for (_, reason) in &filtered.rejected {
        *report.rejected_by_reason.entry(*reason).or_default() += 1;
    }

    let groups = group_by_article(filtered.kept);
    report.articles_total = groups.len();
    let (surviving, excluded) = exclude_binary_conflicts(groups);
    report.excluded_binary_conflicts = excluded;

    let mut articles = Vec::with_capacity(surviving.len());
    for group in surviving.values() {
        if group.len() > 1 {
            match group[0].label {
                Label::Problematic => report.severity_conflicts_resolved += 1,
                _ => report.none_groups_collapsed += 1,
            }
        }
        let article = resolve_severity_conflicts(group)?;
        let counts = report.per_language.entry(article.language.clone()).or_default();
        match article.label {
            ArticleLabel::None => counts.none += 1,
            ArticleLabel::Problematic => counts.problematic += 1,
        }
        articles.push(article);
    }
    Ok((articles, report))
}

/// Runs the full pipeline over a raw corpus.
pub fn build_master_table(
    raw: &[u8],
    format: &CorpusFormat,
    holdout: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<(BankSplit, PipelineReport), IngestError> {
    let records = parse_annotations(raw, format)?;
    let (articles, mut report) = clean_articles(records, format)?;
    let split = split_bank_test(articles, holdout, seed)?;
    for article in &split.bank {
        report.per_language.entry(article.language.clone()).or_default().bank += 1;
    }
    for article in &split.test {
        report.per_language.entry(article.language.clone()).or_default().test += 1;
    }
    Ok((split, report))
}

/// Parses `fa=100,it=100` style per-language counts.
pub fn parse_language_counts(spec: &str) -> Result<BTreeMap<String, usize>, String> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (lang, count) = pair.split_once('=').ok_or_else(|| format!("expected language=count, got {pair:?}"))?;
            let count = count.trim().parse::<usize>().map_err(|_| format!("invalid count in {pair:?}"))?;
            Ok((lang.trim().to_string(), count))
        })
        .collect()
}
