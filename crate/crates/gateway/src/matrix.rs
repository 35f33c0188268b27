use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use exbank_core::bank::{retrieve_by_vector, ExemplarBank, RetrievalResult};
use exbank_core::corpus::CleanArticle;
use exbank_core::embed::Embedder;
use exbank_core::prompt::{
    assemble_prompt, parse_model_output, Assessment, ContextSource, PromptCondition, PromptContext, StaticExemplars,
    TemplateStore, TokenBudget,
};
use exbank_core::report::cell_id;
use serde::{Deserialize, Serialize};

use crate::cache::GenerationRecord;
use crate::config::ModelConfig;
use crate::generate::Gateway;
use crate::GatewayError;

pub const DEFAULT_CONCURRENCY: usize = 4;

/// Everything the matrix needs besides the gateway.
pub struct MatrixSpec<'a> {
    pub items: &'a [CleanArticle],
    pub conditions: &'a [PromptCondition],
    pub models: &'a [ModelConfig],
    pub bank: Option<&'a ExemplarBank>,
    pub embedder: Option<&'a Embedder>,
    pub templates: &'a TemplateStore,
    pub statics: &'a StaticExemplars,
    pub k: usize,
    pub vocabulary: &'a [String],
    pub concurrency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell_id: String,
    pub article_id: String,
    pub language: String,
    pub condition: PromptCondition,
    pub model_id: String,
    pub injected_ids: Vec<String>,
    #[serde(default)]
    pub dropped_ids: Vec<String>,
    #[serde(default)]
    pub shortfall: bool,
    pub template_hash: String,
    pub generation: GenerationRecord,
    pub assessment: Assessment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutput {
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub bank_fingerprint: Option<String>,
    pub embedding_provider: Option<String>,
    pub conditions: Vec<PromptCondition>,
    pub models: Vec<ModelConfig>,
    pub k: usize,
    pub items: usize,
    pub cells_completed: usize,
    pub cells_failed: usize,
}

struct Job<'a> {
    item: &'a CleanArticle,
    condition: PromptCondition,
    model: &'a ModelConfig,
    retrieval: Option<&'a Result<RetrievalResult, String>>,
}

fn retrieve_all(spec: &MatrixSpec<'_>) -> Result<BTreeMap<String, Result<RetrievalResult, String>>, GatewayError> {
    if !spec.conditions.iter().any(|c| c.context_source() == ContextSource::Retrieved) {
        return Ok(BTreeMap::new());
    }
    let (Some(bank), Some(embedder)) = (spec.bank, spec.embedder) else {
        return Err(GatewayError::InvalidConfig("retrieval conditions need a bank and an embedder".into()));
    };
    bank.check_provider(embedder.provider_id()).map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
    let texts: Vec<String> = spec.items.iter().map(|i| i.article_text.clone()).collect();
    let vectors = embedder.embed_batch(&texts).map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
    Ok(spec
        .items
        .iter()
        .zip(vectors)
        .map(|(item, v)| {
            let r = retrieve_by_vector(bank, &item.article_id, &item.language, &v, spec.k).map_err(|e| e.to_string());
            (item.article_id.clone(), r)
        })
        .collect())
}

fn run_cell(job: &Job<'_>, spec: &MatrixSpec<'_>, gateway: &Gateway) -> Result<CellResult, String> {
    let context = match job.condition.context_source() {
        ContextSource::None => PromptContext::None,
        ContextSource::Static => PromptContext::Static(spec.statics.for_language(&job.item.language)),
        ContextSource::Retrieved => match job.retrieval {
            Some(Ok(r)) => PromptContext::Retrieved(r),
            Some(Err(e)) => return Err(format!("retrieval failed: {e}")),
            None => return Err("retrieval missing".into()),
        },
    };
    let budget = TokenBudget { max_tokens: job.model.context_budget, estimator: gateway.estimator() };
    let bundle = assemble_prompt(job.condition, job.item, context, spec.templates, &job.model.id, Some(budget))
        .map_err(|e| e.to_string())?;
    let generation = gateway.generate(&bundle, job.model).map_err(|e| e.to_string())?;
    let assessment = parse_model_output(&generation.text, spec.vocabulary);
    Ok(CellResult {
        cell_id: cell_id(&job.item.article_id, job.condition, &job.model.id),
        article_id: job.item.article_id.clone(),
        language: job.item.language.clone(),
        condition: job.condition,
        model_id: job.model.id.clone(),
        injected_ids: bundle.injected_ids,
        dropped_ids: bundle.dropped_ids,
        shortfall: matches!(job.retrieval, Some(Ok(r)) if r.shortfall)
            && job.condition.context_source() == ContextSource::Retrieved,
        template_hash: bundle.template_hash,
        generation: (*generation).clone(),
        assessment,
    })
}

/// Runs every (item × condition × model) cell.
///
/// Retrieval happens once per item and is shared by all retrieval
/// conditions. Cell failures are collected, never fatal; output is sorted
/// by cell id whatever order the workers finish in.
pub fn run_matrix(spec: &MatrixSpec<'_>, gateway: &Gateway) -> Result<MatrixOutput, GatewayError> {
    for m in spec.models {
        m.validate()?;
    }
    let retrievals = retrieve_all(spec)?;
    let mut jobs = Vec::with_capacity(spec.items.len() * spec.conditions.len() * spec.models.len());
    for item in spec.items {
        for &condition in spec.conditions {
            for model in spec.models {
                jobs.push(Job { item, condition, model, retrieval: retrievals.get(&item.article_id) });
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results = Mutex::new(MatrixOutput::default());
    let workers = spec.concurrency.max(1).min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let outcome = run_cell(job, spec, gateway);
                let mut out = results.lock().expect("results lock");
                match outcome {
                    Ok(cell) => out.cells.push(cell),
                    Err(error) => out.failures.push(CellFailure {
                        cell_id: cell_id(&job.item.article_id, job.condition, &job.model.id),
                        error,
                    }),
                }
            });
        }
    });

    let mut out = results.into_inner().expect("results lock");
    out.cells.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    out.failures.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    Ok(out)
}

impl MatrixOutput {
    pub fn manifest(&self, spec: &MatrixSpec<'_>) -> RunManifest {
        RunManifest {
            bank_fingerprint: spec.bank.map(|b| b.fingerprint().to_string()),
            embedding_provider: spec.embedder.map(|e| e.provider_id().to_string()),
            conditions: spec.conditions.to_vec(),
            models: spec.models.to_vec(),
            k: spec.k,
            items: spec.items.len(),
            cells_completed: self.cells.len(),
            cells_failed: self.failures.len(),
        }
    }

    /// Writes `cells.jsonl`, `failures.jsonl` and `manifest.json`.
    pub fn write(&self, dir: &Path, manifest: &RunManifest) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("cells.jsonl"), &self.cells)?;
        write_jsonl(&dir.join("failures.jsonl"), &self.failures)?;
        let mut json = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
        json.push('\n');
        std::fs::write(dir.join("manifest.json"), json)
    }

    pub fn read(dir: &Path) -> std::io::Result<Self> {
        Ok(Self { cells: read_jsonl(&dir.join("cells.jsonl"))?, failures: read_jsonl(&dir.join("failures.jsonl"))? })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}
