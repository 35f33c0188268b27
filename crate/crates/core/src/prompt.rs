//! Prompt conditions, template rendering and model-output parsing.
//!
//! Every prompt has the same three parts in the same order: instructions,
//! exemplar blocks, then the item under evaluation. The four conditions only
//! vary the instruction language and where the exemplars come from:
//!
//! | condition | instructions | exemplars |
//! |-----------|--------------|-----------|
//! | `B0`      | target       | none      |
//! | `B1`      | target       | static    |
//! | `M1`      | English      | retrieved |
//! | `A1`      | target       | retrieved |
//!
//! Answers use tagged sections (`<SEVERITY>`, `<SPANS>`, `<RATIONALE>`).
//! Spans are a JSON array of strings; empty spans and empty rationales are
//! written as the literal `[]`. Field values escape `&`, `<` and `>` as
//! entities so that article text can never forge a tag.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{ExemplarRecord, RetrievalResult};
use crate::corpus::{CleanArticle, NONE_LABEL};
use crate::text::sha256_hex;

/// Severity label assigned to outputs that could not be parsed.
pub const UNPARSED_LABEL: &str = "UNPARSED";
pub const EMPTY_ARRAY: &str = "[]";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("condition {0} requires context that was not supplied")]
    MissingContext(PromptCondition),
    #[error("condition {0} does not take {1} context")]
    UnexpectedContext(PromptCondition, &'static str),
    #[error("template placeholder {{{0}}} cannot be resolved")]
    TemplateUnresolvedPlaceholder(String),
    #[error("template layout lacks the {{{0}}} placeholder")]
    TemplateMissingPlaceholder(String),
    #[error("no template for condition {0} in language {1}")]
    MissingTemplate(PromptCondition, String),
    #[error("context for language {context} supplied for a {article} article")]
    LanguageMismatch { article: String, context: String },
    #[error("retrieval result belongs to {0}, not to the article being rendered")]
    QueryMismatch(String),
    #[error("article {0} would appear among its own exemplars")]
    Contamination(String),
    #[error("template configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptCondition {
    B0,
    B1,
    M1,
    A1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionLanguage {
    Target,
    English,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSource {
    None,
    Static,
    Retrieved,
}

impl PromptCondition {
    pub const ALL: [PromptCondition; 4] = [Self::B0, Self::B1, Self::M1, Self::A1];

    pub fn instruction_language(self) -> InstructionLanguage {
        match self {
            Self::M1 => InstructionLanguage::English,
            Self::B0 | Self::B1 | Self::A1 => InstructionLanguage::Target,
        }
    }

    pub fn context_source(self) -> ContextSource {
        match self {
            Self::B0 => ContextSource::None,
            Self::B1 => ContextSource::Static,
            Self::M1 | Self::A1 => ContextSource::Retrieved,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::B0 => "B0",
            Self::B1 => "B1",
            Self::M1 => "M1",
            Self::A1 => "A1",
        }
    }

    /// Parses `B0,B1,M1,A1`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, String> {
        s.split(',').map(str::trim).filter(|c| !c.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for PromptCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "B0" => Ok(Self::B0),
            "B1" => Ok(Self::B1),
            "M1" => Ok(Self::M1),
            "A1" => Ok(Self::A1),
            other => Err(format!("unknown prompt condition {other:?}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Escaping

/// Escapes a field value so it cannot contain tag delimiters.
pub fn escape_field(s: &str) -> String {
    let escaped = s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    if escaped == EMPTY_ARRAY {
        // a literal "[]" rationale must not read back as empty
        "&#91;]".to_string()
    } else {
        escaped
    }
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let (decoded, len) = if rest.starts_with("&amp;") {
            ('&', 5)
        } else if rest.starts_with("&lt;") {
            ('<', 4)
        } else if rest.starts_with("&gt;") {
            ('>', 4)
        } else if rest.starts_with("&#91;") {
            ('[', 5)
        } else {
            ('&', 1)
        };
        out.push(decoded);
        rest = &rest[len..];
    }
    out.push_str(rest);
    out
}

fn render_spans(spans: &[String]) -> String {
    if spans.is_empty() {
        EMPTY_ARRAY.to_string()
    } else {
        escape_field(&serde_json::to_string(spans).expect("strings serialize"))
    }
}

fn render_rationale(rationale: &str) -> String {
    if rationale.is_empty() {
        EMPTY_ARRAY.to_string()
    } else {
        escape_field(rationale)
    }
}

// ---------------------------------------------------------------------------
// Rendering

/// Renders one exemplar as a tagged block.
///
/// `None` exemplars render spans and rationale as the literal `[]`.
pub fn render_exemplar(ex: &ExemplarRecord, index: usize) -> String {
    let severity = match ex.label {
        crate::corpus::ArticleLabel::None => NONE_LABEL.to_string(),
        crate::corpus::ArticleLabel::Problematic => ex.severity.clone().unwrap_or_default(),
    };
    format!(
        "<EXAMPLE {index}>\n<TEXT>\n{}\n</TEXT>\n<SEVERITY>{}</SEVERITY>\n<SPANS>{}</SPANS>\n<RATIONALE>{}</RATIONALE>\n</EXAMPLE {index}>",
        escape_field(&ex.text),
        escape_field(&severity),
        render_spans(&ex.span_texts()),
        render_rationale(&ex.rationale),
    )
}

fn render_item(article: &CleanArticle) -> String {
    format!("<ITEM>\n<TEXT>\n{}\n</TEXT>\n</ITEM>", escape_field(&article.article_text))
}

/// Renders an assessment in the answer format the instructions request.
pub fn render_answer(severity: &str, spans: &[String], rationale: &str) -> String {
    format!(
        "<SEVERITY>{}</SEVERITY>\n<SPANS>{}</SPANS>\n<RATIONALE>{}</RATIONALE>",
        escape_field(severity),
        render_spans(spans),
        render_rationale(rationale)
    )
}

/// Fields recovered from one `<EXAMPLE n>` block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarFields {
    pub text: String,
    pub severity: String,
    pub spans: Vec<String>,
    pub rationale: String,
}

/// Extracts every exemplar block from a rendered prompt, in order.
pub fn parse_exemplar_blocks(prompt: &str) -> Vec<ExemplarFields> {
    static BLOCK: OnceLock<Regex> = OnceLock::new();
    let block = BLOCK.get_or_init(|| Regex::new(r"(?s)<EXAMPLE (\d+)>\n(.*?)\n</EXAMPLE (\d+)>").unwrap());
    block
        .captures_iter(prompt)
        .filter(|c| c[1] == c[3])
        .filter_map(|c| {
            let body = c.get(2)?.as_str();
            let text = exact_sections(body, "TEXT").into_iter().next()?;
            let text = text.strip_prefix('\n').unwrap_or(text);
            let text = text.strip_suffix('\n').unwrap_or(text);
            let parsed = parse_model_output(body, &[]);
            (parsed.parse_status == ParseStatus::Clean).then(|| ExemplarFields {
                text: unescape_field(text),
                severity: parsed.severity.unwrap_or_default(),
                spans: parsed.spans,
                rationale: parsed.rationale,
            })
        })
        .collect()
}

/// Estimates tokens as one per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Prompt size limit used to drop the lowest-ranked exemplars.
#[derive(Clone, Copy)]
pub struct TokenBudget {
    pub max_tokens: usize,
    pub estimator: fn(&str) -> usize,
}

impl TokenBudget {
    pub fn new(max_tokens: usize) -> Self {
        Self { max_tokens, estimator: estimate_tokens }
    }
}

impl fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenBudget").field("max_tokens", &self.max_tokens).finish()
    }
}

/// Exemplars supplied to [`assemble_prompt`].
#[derive(Debug, Clone, Copy)]
pub enum PromptContext<'a> {
    None,
    Static(&'a [ExemplarRecord]),
    Retrieved(&'a RetrievalResult),
}

/// A fully rendered prompt plus the provenance of its exemplars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub condition: PromptCondition,
    pub model_id: String,
    pub article_id: String,
    pub language: String,
    pub prompt: String,
    /// Injected exemplar ids, in rank order.
    pub injected_ids: Vec<String>,
    /// Lowest-ranked exemplars dropped to fit the token budget.
    #[serde(default)]
    pub dropped_ids: Vec<String>,
    pub template_hash: String,
}

/// Renders the prompt for one `(condition, article)` pair.
pub fn assemble_prompt(
    condition: PromptCondition,
    article: &CleanArticle,
    context: PromptContext<'_>,
    templates: &TemplateStore,
    model_id: &str,
    budget: Option<TokenBudget>,
) -> Result<PromptBundle, PromptError> {
    let exemplars: Vec<&ExemplarRecord> = match (condition.context_source(), context) {
        (ContextSource::None, PromptContext::None) => Vec::new(),
        (ContextSource::Static, PromptContext::Static(list)) if !list.is_empty() => list.iter().collect(),
        (ContextSource::Retrieved, PromptContext::Retrieved(result)) => {
            if result.query_article_id != article.article_id {
                return Err(PromptError::QueryMismatch(result.query_article_id.clone()));
            }
            result.hits.iter().map(|h| &h.exemplar).collect()
        }
        (ContextSource::None, PromptContext::Static(_)) => {
            return Err(PromptError::UnexpectedContext(condition, "static"))
        }
        (ContextSource::None, PromptContext::Retrieved(_)) => {
            return Err(PromptError::UnexpectedContext(condition, "retrieved"))
        }
        _ => return Err(PromptError::MissingContext(condition)),
    };
    for ex in &exemplars {
        if ex.language != article.language {
            return Err(PromptError::LanguageMismatch {
                article: article.language.clone(),
                context: ex.language.clone(),
            });
        }
        if ex.article_id == article.article_id {
            return Err(PromptError::Contamination(article.article_id.clone()));
        }
    }

    let entry = templates.lookup(condition, &article.language)?;
    let item = render_item(article);
    let mut kept = exemplars.len();
    let mut prompt = entry.render(&exemplars, &item)?;
    if let Some(budget) = budget {
        while kept > 0 && (budget.estimator)(&prompt) > budget.max_tokens {
            kept -= 1;
            prompt = entry.render(&exemplars[..kept], &item)?;
        }
    }

    Ok(PromptBundle {
        condition,
        model_id: model_id.to_string(),
        article_id: article.article_id.clone(),
        language: article.language.clone(),
        prompt,
        injected_ids: exemplars[..kept].iter().map(|e| e.article_id.clone()).collect(),
        dropped_ids: exemplars[kept..].iter().map(|e| e.article_id.clone()).collect(),
        template_hash: entry.hash(),
    })
}

// ---------------------------------------------------------------------------
// Templates

pub const DEFAULT_LAYOUT: &str = "{INSTRUCTIONS}\n\n{EXEMPLARS}\n\n{ITEM}\n";

const ANSWER_FORMAT: &str = "<SEVERITY>...</SEVERITY>\n<SPANS>[\"...\"]</SPANS>\n<RATIONALE>...</RATIONALE>";

pub fn default_instructions(language: &str) -> Option<String> {
    let body = match language {
        "en" => "You are a framing and language bias expert. Your job is to analyze news excerpts and identify text spans that carry manipulative or problematic framing. \
For the news item below, choose one severity label from: {SEVERITY_LABELS}. Quote every problematic span verbatim from the text, and write a short rationale grounded in the text and in its cultural and political context. \
If nothing is problematic, use the label None and write [] for both the spans and the rationale. \
The examples, when present, show how native-speaking experts assessed similar news. \
Answer with exactly these tagged sections:",
        "fa" => "شما یک متخصص چارچوب‌بندی و سوگیری زبانی هستید. وظیفه شما تجزیه و تحلیل گزیده‌های خبری و شناسایی بازه‌های متنی است که چارچوب‌بندی فریبنده یا مسئله‌دار دارند. \
برای خبر زیر یک برچسب شدت از میان این موارد انتخاب کنید: {SEVERITY_LABELS}. هر بازه مسئله‌دار را عیناً از متن نقل کنید و توضیحی کوتاه بنویسید که بر متن و بافت فرهنگی و سیاسی آن تکیه دارد. \
اگر هیچ مورد مسئله‌داری وجود ندارد، برچسب None را به کار ببرید و برای بازه‌ها و توضیح [] بنویسید. \
نمونه‌ها، در صورت وجود، ارزیابی کارشناسان بومی از خبرهای مشابه را نشان می‌دهند. \
پاسخ را دقیقاً با این بخش‌های برچسب‌دار بدهید:",
        "it" => "Sei un esperto di framing e di bias linguistico. Il tuo compito è analizzare estratti di notizie e individuare le porzioni di testo con un framing manipolatorio o problematico. \
Per la notizia seguente scegli un'etichetta di gravità tra: {SEVERITY_LABELS}. Cita testualmente ogni porzione problematica e scrivi una breve motivazione fondata sul testo e sul suo contesto culturale e politico. \
Se non c'è nulla di problematico, usa l'etichetta None e scrivi [] sia per le porzioni sia per la motivazione. \
Gli esempi, quando presenti, mostrano come esperti madrelingua hanno valutato notizie simili. \
Rispondi usando esattamente queste sezioni con tag:",
        _ => return None,
    };
    Some(format!("{body}\n{ANSWER_FORMAT}"))
}

/// Resolved layout and instruction text for one `(condition, language)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateEntry {
    pub layout: String,
    pub instructions: String,
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Z_]+)\}").unwrap())
}

impl TemplateEntry {
    pub fn hash(&self) -> String {
        let digest = sha256_hex(format!("{}\u{0}{}", self.layout, self.instructions).as_bytes());
        digest[..16].to_string()
    }

    fn render(&self, exemplars: &[&ExemplarRecord], item: &str) -> Result<String, PromptError> {
        let blocks: Vec<String> = exemplars.iter().enumerate().map(|(i, ex)| render_exemplar(ex, i + 1)).collect();
        let exemplar_text = blocks.join("\n\n");

        let mut out = String::with_capacity(self.layout.len() + item.len() + exemplar_text.len());
        let mut last = 0;
        for cap in placeholder_regex().captures_iter(&self.layout) {
            let whole = cap.get(0).unwrap();
            out.push_str(&self.layout[last..whole.start()]);
            match &cap[1] {
                "INSTRUCTIONS" => out.push_str(&self.instructions),
                "EXEMPLARS" => out.push_str(&exemplar_text),
                "ITEM" => out.push_str(item),
                other => return Err(PromptError::TemplateUnresolvedPlaceholder(other.to_string())),
            }
            last = whole.end();
        }
        out.push_str(&self.layout[last..]);
        // collapse the blank run left by an empty exemplar section
        while out.contains("\n\n\n") {
            out = out.replace("\n\n\n", "\n\n");
        }
        Ok(out)
    }
}

/// Per-`(condition, language)` layouts and instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateStore {
    entries: BTreeMap<(PromptCondition, String), TemplateEntry>,
}

#[derive(Debug, Deserialize)]
struct TemplateConfig {
    #[serde(default)]
    severity_labels: Vec<String>,
    #[serde(default)]
    template: Vec<TemplateConfigEntry>,
}

#[derive(Debug, Deserialize)]
struct TemplateConfigEntry {
    condition: PromptCondition,
    language: String,
    #[serde(default)]
    layout: Option<String>,
    #[serde(default)]
    instructions: Option<String>,
}

impl TemplateStore {
    /// Built-in templates for `languages`, listing `severity_labels` in the
    /// instructions.
    pub fn defaults(languages: &[&str], severity_labels: &[String]) -> Result<Self, PromptError> {
        let mut store = Self { entries: BTreeMap::new() };
        for &language in languages {
            for condition in PromptCondition::ALL {
                let instruction_lang = match condition.instruction_language() {
                    InstructionLanguage::English => "en",
                    InstructionLanguage::Target => language,
                };
                let instructions = default_instructions(instruction_lang)
                    .ok_or_else(|| PromptError::MissingTemplate(condition, language.to_string()))?;
                store.insert(condition, language, DEFAULT_LAYOUT.to_string(), instructions, severity_labels)?;
            }
        }
        Ok(store)
    }

    /// Loads a TOML template configuration on top of the built-in defaults.
    ///
    /// ```toml
    /// severity_labels = ["low", "medium", "high"]
    ///
    /// [[template]]
    /// condition = "M1"
    /// language = "fa"
    /// layout = "layout.txt"              # relative to the config file
    /// instructions = "instructions.en.txt"
    /// ```
    pub fn load(path: &Path, languages: &[&str]) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PromptError::Config(format!("{}: {e}", path.display())))?;
        let config: TemplateConfig = toml::from_str(&raw).map_err(|e| PromptError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let read =
            |rel: &str| std::fs::read_to_string(base.join(rel)).map_err(|e| PromptError::Config(format!("{rel}: {e}")));

        let mut store = Self::defaults(languages, &config.severity_labels)?;
        for entry in &config.template {
            let current = store.entries.get(&(entry.condition, entry.language.clone())).cloned();
            let layout = match &entry.layout {
                Some(rel) => read(rel)?,
                None => current.as_ref().map(|c| c.layout.clone()).unwrap_or_else(|| DEFAULT_LAYOUT.into()),
            };
            let instructions = match &entry.instructions {
                Some(rel) => read(rel)?,
                None => current
                    .map(|c| c.instructions)
                    .ok_or_else(|| PromptError::MissingTemplate(entry.condition, entry.language.clone()))?,
            };
            store.insert(entry.condition, &entry.language, layout, instructions, &config.severity_labels)?;
        }
        Ok(store)
    }

    fn insert(
        &mut self,
        condition: PromptCondition,
        language: &str,
        layout: String,
        instructions: String,
        severity_labels: &[String],
    ) -> Result<(), PromptError> {
        let mut names: Vec<String> = placeholder_regex().captures_iter(&layout).map(|c| c[1].to_string()).collect();
        if let Some(unknown) = names.iter().find(|n| !matches!(n.as_str(), "INSTRUCTIONS" | "EXEMPLARS" | "ITEM")) {
            return Err(PromptError::TemplateUnresolvedPlaceholder(unknown.clone()));
        }
        names.sort();
        names.dedup();
        for required in ["INSTRUCTIONS", "ITEM"] {
            if !names.iter().any(|n| n == required) {
                return Err(PromptError::TemplateMissingPlaceholder(required.into()));
            }
        }
        if condition.context_source() != ContextSource::None && !names.iter().any(|n| n == "EXEMPLARS") {
            return Err(PromptError::TemplateMissingPlaceholder("EXEMPLARS".into()));
        }

        let mut labels: Vec<String> = severity_labels.to_vec();
        labels.push(NONE_LABEL.into());
        let instructions = instructions.replace("{SEVERITY_LABELS}", &labels.join(", "));
        self.entries.insert((condition, language.to_string()), TemplateEntry { layout, instructions });
        Ok(())
    }

    pub fn lookup(&self, condition: PromptCondition, language: &str) -> Result<&TemplateEntry, PromptError> {
        self.entries
            .get(&(condition, language.to_string()))
            .ok_or_else(|| PromptError::MissingTemplate(condition, language.to_string()))
    }
}

/// Fixed per-language exemplars used by the static few-shot condition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticExemplars {
    by_language: BTreeMap<String, Vec<ExemplarRecord>>,
}

impl StaticExemplars {
    pub fn new(records: Vec<ExemplarRecord>) -> Self {
        let mut by_language: BTreeMap<String, Vec<ExemplarRecord>> = BTreeMap::new();
        for r in records {
            by_language.entry(r.language.clone()).or_default().push(r);
        }
        Self { by_language }
    }

    /// Reads one [`ExemplarRecord`] JSON object per line.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let raw = std::fs::read_to_string(path).map_err(|e| PromptError::Config(format!("{}: {e}", path.display())))?;
        let records = raw
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| PromptError::Config(format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(records))
    }

    pub fn for_language(&self, language: &str) -> &[ExemplarRecord] {
        self.by_language.get(language).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExemplarRecord> {
        self.by_language.values().flatten()
    }
}

// ---------------------------------------------------------------------------
// Output parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Repaired,
    Failed,
}

/// Parsed model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    /// Severity label, [`NONE_LABEL`] for unproblematic items; unset on failure.
    pub severity: Option<String>,
    pub spans: Vec<String>,
    pub rationale: String,
    pub parse_status: ParseStatus,
    pub raw: String,
}

impl Assessment {
    /// The label used for scoring; failures count as [`UNPARSED_LABEL`].
    pub fn severity_label(&self) -> &str {
        match (self.parse_status, &self.severity) {
            (ParseStatus::Failed, _) | (_, None) => UNPARSED_LABEL,
            (_, Some(s)) => s,
        }
    }

    pub fn is_none_label(&self) -> bool {
        self.severity.as_deref() == Some(NONE_LABEL)
    }
}

fn exact_sections<'a>(raw: &'a str, tag: &str) -> Vec<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find(&open) {
        let after = &rest[start + open.len()..];
        match after.find(&close) {
            Some(end) => {
                out.push(&after[..end]);
                rest = &after[end + close.len()..];
            }
            None => break,
        }
    }
    out
}

fn loose_section(raw: &str, tag: &str) -> Option<String> {
    let pattern = format!(r"(?is)<\s*{tag}\s*>(.*?)(?:<\s*/\s*{tag}\s*>|\z)");
    let re = Regex::new(&pattern).expect("static tag pattern");
    re.captures_iter(raw).last().map(|c| c.get(1).map_or("", |m| m.as_str()).to_string())
}

fn parse_spans_strict(value: &str) -> Option<Vec<String>> {
    let value = value.trim();
    if value == EMPTY_ARRAY {
        return Some(Vec::new());
    }
    let spans: Vec<String> = serde_json::from_str(&unescape_field(value)).ok()?;
    (!spans.is_empty() && spans.iter().all(|s| !s.is_empty())).then_some(spans)
}

fn parse_spans_loose(value: &str) -> Vec<String> {
    let value = unescape_field(value.trim());
    if value.is_empty() || value == EMPTY_ARRAY {
        return Vec::new();
    }
    if let Ok(spans) = serde_json::from_str::<Vec<String>>(&value) {
        return spans.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    let inner = value.strip_prefix('[').and_then(|v| v.strip_suffix(']')).unwrap_or(&value);
    inner
        .lines()
        .flat_map(|l| if l.contains("\",") { l.split("\",").collect::<Vec<_>>() } else { vec![l] })
        .map(|s| {
            s.trim()
                .trim_start_matches(['-', '*', '•'])
                .trim()
                .trim_matches(|c| matches!(c, '"' | '\'' | '«' | '»' | '“' | '”' | ','))
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_rationale(value: &str) -> String {
    let value = value.trim();
    if value == EMPTY_ARRAY {
        String::new()
    } else {
        unescape_field(value)
    }
}

fn match_severity(value: &str, vocabulary: &[String]) -> Option<(String, bool)> {
    let value = unescape_field(value.trim());
    if value == NONE_LABEL {
        return Some((NONE_LABEL.to_string(), true));
    }
    if vocabulary.is_empty() {
        return (!value.is_empty()).then(|| (value.clone(), true));
    }
    if vocabulary.contains(&value) {
        return Some((value, true));
    }
    let folded = value.to_lowercase();
    if folded == NONE_LABEL.to_lowercase() {
        return Some((NONE_LABEL.to_string(), false));
    }
    vocabulary.iter().find(|v| v.to_lowercase() == folded).map(|v| (v.clone(), false))
}

/// Parses a tagged model answer.
///
/// A `clean` parse has each tag exactly once in canonical form, a known
/// severity, well-formed spans, and no spans under `None`. Anything readable
/// only after case-insensitive or whitespace-tolerant matching is
/// `repaired`. Without a recognizable severity the parse `failed`.
pub fn parse_model_output(raw: &str, vocabulary: &[String]) -> Assessment {
    let failed = || Assessment {
        severity: None,
        spans: Vec::new(),
        rationale: String::new(),
        parse_status: ParseStatus::Failed,
        raw: raw.to_string(),
    };

    let sev = exact_sections(raw, "SEVERITY");
    let spans = exact_sections(raw, "SPANS");
    let rat = exact_sections(raw, "RATIONALE");
    if sev.len() == 1 && spans.len() == 1 && rat.len() == 1 && sev[0] == sev[0].trim() {
        if let (Some((severity, true)), Some(span_list)) =
            (match_severity(sev[0], vocabulary), parse_spans_strict(spans[0]))
        {
            let none_ok = severity != NONE_LABEL || span_list.is_empty();
            if none_ok {
                return Assessment {
                    severity: Some(severity),
                    spans: span_list,
                    rationale: parse_rationale(rat[0]),
                    parse_status: ParseStatus::Clean,
                    raw: raw.to_string(),
                };
            }
        }
    }

    let Some(sev) = loose_section(raw, "SEVERITY") else {
        return failed();
    };
    let Some((severity, _)) = match_severity(&sev, vocabulary) else {
        return failed();
    };
    Assessment {
        severity: Some(severity),
        spans: loose_section(raw, "SPANS").map(|s| parse_spans_loose(&s)).unwrap_or_default(),
        rationale: loose_section(raw, "RATIONALE").map(|r| parse_rationale(&r)).unwrap_or_default(),
        parse_status: ParseStatus::Repaired,
        raw: raw.to_string(),
    }
}
