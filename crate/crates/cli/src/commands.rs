use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use exbank_core::ab::{
    aggregate_ab_ratings, build_ab_assignments, export_for_evaluators, provenance, AbRating, AbReport, EvaluatorRecord,
    ProvenanceRecord,
};
use exbank_core::bank::{retrieve, retrieve_by_vector, ExemplarBank};
use exbank_core::corpus::{
    build_master_table, filter_unusable, parse_annotations, parse_language_counts, ArticleLabel, CleanArticle,
    CorpusFormat,
};
use exbank_core::prompt::{
    assemble_prompt, ContextSource, PromptCondition, PromptContext, StaticExemplars, TemplateStore, TokenBudget,
};
use exbank_core::report::{
    disparity_by_annotator, disparity_by_language, score_cells, summarize_cells, write_scores, Report, ScoringInput,
};
use exbank_core::synth::{synthetic_corpus, to_jsonl, SynthConfig};
use exbank_gateway::matrix::{read_jsonl, write_jsonl};
use exbank_gateway::{
    load_models, run_matrix, ChatProvider, Gateway, GenerationCache, MatrixOutput, MatrixSpec, MockProvider,
    ModelConfig, ModelRouter,
};
use exbank_server::store::{QueueItem, CONFIG_FILE, EXPORT_FILE, QUEUE_FILE, TEST_IDS_FILE};
use serde::Deserialize;

use crate::providers::{embedder_for_bank, embedder_from_spec, rationale_scorer};
use crate::splitdir::{self, observed_vocabulary, SplitDir};

pub const ASSIGNMENTS_FILE: &str = "assignments.json";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";

pub fn synth(out: &Path, languages: Vec<String>, per_language: usize, edge_rate: f64, seed: u64) -> Result<()> {
    let config = SynthConfig {
        languages,
        articles_per_language: per_language,
        edge_case_rate: edge_rate,
        seed,
        ..Default::default()
    };
    let records = synthetic_corpus(&config);
    std::fs::write(out, to_jsonl(&records)).with_context(|| format!("writing {}", out.display()))?;
    println!("{} annotation records written to {}", records.len(), out.display());
    Ok(())
}

fn load_format(path: Option<&Path>) -> Result<CorpusFormat> {
    let Some(path) = path else { return Ok(CorpusFormat::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let format: CorpusFormat = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    format.validate()?;
    Ok(format)
}

pub fn ingest(corpus: &Path, format: Option<&Path>, holdout: &str, seed: u64, out: &Path) -> Result<()> {
    let format = load_format(format)?;
    let holdout = parse_language_counts(holdout).map_err(|e| anyhow!(e))?;
    let raw = std::fs::read(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let (split, report) = build_master_table(&raw, &format, &holdout, seed)?;
    let kept = filter_unusable(parse_annotations(&raw, &format)?, &format).kept;
    let articles: Vec<CleanArticle> = split.all_articles().cloned().collect();
    let languages = if format.languages.is_empty() {
        articles.iter().map(|a| a.language.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        format.languages.clone()
    };
    let vocabulary = if format.severity_vocabulary.is_empty() {
        observed_vocabulary(&articles)
    } else {
        format.severity_vocabulary.clone()
    };
    splitdir::write(out, &split, &report, &kept, languages, vocabulary)?;
    print!("{}", report.render_text());
    println!("split written to {}", out.display());
    Ok(())
}

pub fn build_bank(split: &Path, provider: &str, model: Option<&str>, dim: Option<usize>, out: &Path) -> Result<()> {
    let sd = splitdir::read(split)?;
    let embedder = embedder_from_spec(provider, model, dim)?;
    let bank = ExemplarBank::from_split(&sd.split, &embedder)?;
    bank.save(out).with_context(|| format!("writing {}", out.display()))?;
    for lang in bank.languages() {
        println!("{lang}: {} exemplars", bank.pool(lang).map_or(0, <[_]>::len));
    }
    println!("bank {} ({}) written to {}", bank.fingerprint(), bank.provider_id(), out.display());
    Ok(())
}

pub fn retrieve_cmd(
    bank: &Path,
    split: Option<&Path>,
    query_id: &str,
    k: usize,
    embed_url: Option<&str>,
) -> Result<()> {
    let bank = ExemplarBank::load(bank)?;
    let embedder = embedder_for_bank(&bank, embed_url)?;
    let sd = split.map(splitdir::read).transpose()?;
    let result = match sd.as_ref().and_then(|s| s.article(query_id)) {
        Some(article) => retrieve(article, &bank, &embedder, k)?,
        None => {
            let e = bank
                .get(query_id)
                .ok_or_else(|| anyhow!("article {query_id} is neither in the bank nor in the split"))?;
            retrieve_by_vector(&bank, query_id, &e.record.language, &e.embedding, k)?
        }
    };
    for (rank, hit) in result.hits.iter().enumerate() {
        println!("{}\t{}\t{:.6}", rank + 1, hit.exemplar.article_id, hit.score);
    }
    if result.shortfall {
        println!("shortfall: {} of {k} requested", result.k_returned());
    }
    Ok(())
}

/// Optional template/static overrides shared by `render` and `run`.
pub struct PromptInputs {
    pub templates: Option<PathBuf>,
    pub statics: Option<PathBuf>,
}

impl PromptInputs {
    fn load(&self, sd: &SplitDir, split_dir: &Path) -> Result<(TemplateStore, StaticExemplars)> {
        let languages = sd.languages();
        let templates = match &self.templates {
            Some(p) => TemplateStore::load(p, &languages)?,
            None => TemplateStore::defaults(&languages, &sd.meta.severity_vocabulary)?,
        };
        let static_path = self.statics.clone().unwrap_or_else(|| split_dir.join(splitdir::STATIC));
        let statics =
            if static_path.exists() { StaticExemplars::load(&static_path)? } else { StaticExemplars::new(Vec::new()) };
        Ok((templates, statics))
    }
}

fn load_model_configs(path: Option<&Path>) -> Result<Vec<ModelConfig>> {
    Ok(match path {
        Some(p) => load_models(p)?,
        None => ModelConfig::defaults(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn render(
    condition: PromptCondition,
    article_id: &str,
    split: &Path,
    bank: Option<&Path>,
    k: usize,
    inputs: &PromptInputs,
    models: Option<&Path>,
    model: Option<&str>,
    embed_url: Option<&str>,
) -> Result<()> {
    let sd = splitdir::read(split)?;
    let article = sd.article(article_id).ok_or_else(|| anyhow!("article {article_id} is not in the split"))?;
    let (templates, statics) = inputs.load(&sd, split)?;
    let configs = load_model_configs(models)?;
    let config = match model {
        Some(id) => configs.iter().find(|m| m.id == id).ok_or_else(|| anyhow!("no model {id} configured"))?,
        None => configs.first().ok_or_else(|| anyhow!("no models configured"))?,
    };
    let retrieval;
    let context = match condition.context_source() {
        ContextSource::None => PromptContext::None,
        ContextSource::Static => PromptContext::Static(statics.for_language(&article.language)),
        ContextSource::Retrieved => {
            let path = bank.ok_or_else(|| anyhow!("{condition} needs --bank"))?;
            let bank = ExemplarBank::load(path)?;
            retrieval = retrieve(article, &bank, &embedder_for_bank(&bank, embed_url)?, k)?;
            PromptContext::Retrieved(&retrieval)
        }
    };
    let bundle = assemble_prompt(
        condition,
        article,
        context,
        &templates,
        &config.id,
        Some(TokenBudget::new(config.context_budget)),
    )?;
    println!(
        "# condition: {} model: {} article: {} ({})",
        bundle.condition, bundle.model_id, bundle.article_id, bundle.language
    );
    println!(
        "# exemplars: {}",
        if bundle.injected_ids.is_empty() { "-".into() } else { bundle.injected_ids.join(", ") }
    );
    if !bundle.dropped_ids.is_empty() {
        println!("# dropped for budget: {}", bundle.dropped_ids.join(", "));
    }
    println!("# template: {}\n", bundle.template_hash);
    print!("{}", bundle.prompt);
    Ok(())
}

/// Minimal unlabeled article for runs outside the test split.
#[derive(Debug, Deserialize)]
struct ItemInput {
    article_id: String,
    language: String,
    article_text: String,
}

fn read_items(path: &Path) -> Result<Vec<CleanArticle>> {
    let rows: Vec<ItemInput> = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(rows
        .into_iter()
        .map(|r| CleanArticle {
            source_record_id: r.article_id.clone(),
            article_id: r.article_id,
            language: r.language,
            article_text: r.article_text,
            label: ArticleLabel::None,
            severity: None,
            spans: Vec::new(),
            rationale: String::new(),
            rejected_record_ids: Vec::new(),
            metadata: BTreeMap::new(),
        })
        .collect())
}

pub struct RunArgs {
    pub split: PathBuf,
    pub bank: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub conditions: Vec<PromptCondition>,
    pub models: Option<PathBuf>,
    pub k: usize,
    pub out: PathBuf,
    pub provider: String,
    pub cache: Option<PathBuf>,
    pub concurrency: usize,
    pub prompt_inputs: PromptInputs,
    pub embed_url: Option<String>,
}

pub fn run(args: &RunArgs) -> Result<()> {
    let sd = splitdir::read(&args.split)?;
    let items = match &args.items {
        Some(p) => read_items(p)?,
        None => sd.split.test.clone(),
    };
    let models = load_model_configs(args.models.as_deref())?;
    let bank = args.bank.as_deref().map(ExemplarBank::load).transpose()?;
    let needs_bank = args.conditions.iter().any(|c| c.context_source() == ContextSource::Retrieved);
    if needs_bank && bank.is_none() {
        bail!("retrieved conditions need --bank");
    }
    let embedder = bank.as_ref().map(|b| embedder_for_bank(b, args.embed_url.as_deref())).transpose()?;
    let (templates, statics) = args.prompt_inputs.load(&sd, &args.split)?;
    let vocabulary = sd.meta.severity_vocabulary.clone();

    std::fs::create_dir_all(&args.out)?;
    let cache_path = args.cache.clone().unwrap_or_else(|| args.out.join("cache.jsonl"));
    let cache = Arc::new(GenerationCache::open(&cache_path)?);
    let provider: Arc<dyn ChatProvider> = match args.provider.as_str() {
        "mock" => Arc::new(MockProvider::new(vocabulary.clone())),
        "http" => Arc::new(ModelRouter::from_configs(&models)?),
        other => bail!("unknown provider {other:?}; use mock or http"),
    };
    let gateway = Gateway::new(provider, cache.clone());
    let spec = MatrixSpec {
        items: &items,
        conditions: &args.conditions,
        models: &models,
        bank: bank.as_ref(),
        embedder: embedder.as_ref(),
        templates: &templates,
        statics: &statics,
        k: args.k,
        vocabulary: &vocabulary,
        concurrency: args.concurrency,
    };
    let output = run_matrix(&spec, &gateway)?;
    output.write(&args.out, &output.manifest(&spec))?;
    println!(
        "{} cells completed, {} failed; {} cached generations; results in {}",
        output.cells.len(),
        output.failures.len(),
        cache.len(),
        args.out.display()
    );
    for f in output.failures.iter().take(5) {
        println!("  failed {}: {}", f.cell_id, f.error);
    }
    Ok(())
}

/// Reads completed evaluator records or stored ratings, one per line.
pub fn read_ratings(path: &Path) -> Result<Vec<AbRating>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rating = match serde_json::from_str::<EvaluatorRecord>(line) {
            Ok(record) => record.to_rating()?,
            Err(_) => serde_json::from_str::<AbRating>(line).with_context(|| {
                format!("{} line {}: neither a rating nor an evaluator record", path.display(), i + 1)
            })?,
        };
        rating.validate()?;
        out.push(rating);
    }
    Ok(out)
}

fn read_groups(path: Option<&Path>) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
    }
}

fn ab_report_from(ratings: &Path, provenance: &Path, groups: Option<&Path>) -> Result<AbReport> {
    let ratings = read_ratings(ratings)?;
    let provenance: Vec<ProvenanceRecord> =
        read_jsonl(provenance).with_context(|| format!("reading {}", provenance.display()))?;
    Ok(aggregate_ab_ratings(&ratings, &provenance, &read_groups(groups)?)?)
}

pub struct EvaluateArgs {
    pub run: PathBuf,
    pub split: PathBuf,
    pub out: PathBuf,
    pub scorer_url: Option<String>,
    pub annotator_keys: Vec<String>,
    pub ratings: Option<PathBuf>,
    pub provenance: Option<PathBuf>,
    pub groups: Option<PathBuf>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let output = MatrixOutput::read(&args.run).with_context(|| format!("reading run {}", args.run.display()))?;
    let sd = splitdir::read(&args.split)?;
    let references: BTreeMap<String, CleanArticle> =
        sd.split.test.iter().map(|a| (a.article_id.clone(), a.clone())).collect();
    let inputs: Vec<ScoringInput<'_>> = output
        .cells
        .iter()
        .filter(|c| references.contains_key(&c.article_id))
        .map(|c| ScoringInput {
            article_id: &c.article_id,
            condition: c.condition,
            model_id: &c.model_id,
            assessment: &c.assessment,
        })
        .collect();
    let skipped = output.cells.len() - inputs.len();
    if skipped > 0 {
        log::warn!("{skipped} cells have no reference in the test split and are not scored");
    }
    if !output.failures.is_empty() {
        log::warn!("{} cells failed during the run and are missing from the report", output.failures.len());
    }
    let scorer = rationale_scorer(args.scorer_url.as_deref());
    let scores = score_cells(&inputs, &references, scorer.as_ref())?;
    let rows = summarize_cells(&scores)?;
    let mut disparities = disparity_by_language(&scores);
    let annotations = splitdir::read_annotations(&args.split)?;
    let keys: Vec<String> = if args.annotator_keys.is_empty() {
        annotations.iter().flat_map(|a| a.annotator_meta.keys().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        args.annotator_keys.clone()
    };
    for key in &keys {
        disparities.extend(disparity_by_annotator(&scores, &annotations, key));
    }
    let ab = match (&args.ratings, &args.provenance) {
        (Some(r), Some(p)) => Some(ab_report_from(r, p, args.groups.as_deref())?),
        (None, None) => None,
        _ => bail!("--ratings and --provenance go together"),
    };
    let report = Report { scorer: scorer.id(), rows, disparities, ab };
    report.emit(&args.out)?;
    write_scores(&args.out.join("scores.jsonl"), &scores)?;
    println!("{} cells scored into {} rows; report in {}", scores.len(), report.rows.len(), args.out.display());
    Ok(())
}

fn parse_pair(pair: &str) -> Result<(PromptCondition, PromptCondition)> {
    let (a, b) = pair.split_once(':').ok_or_else(|| anyhow!("pair must look like B1:M1"))?;
    Ok((a.parse().map_err(|e: String| anyhow!(e))?, b.parse().map_err(|e: String| anyhow!(e))?))
}

pub struct AssignmentArgs {
    pub split: PathBuf,
    pub evaluators: String,
    pub pair: String,
    pub seed: u64,
    pub run: Option<PathBuf>,
    pub model: Option<String>,
    pub out: PathBuf,
}

pub fn assignments(args: &AssignmentArgs) -> Result<()> {
    let sd = splitdir::read(&args.split)?;
    let mut items: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for a in &sd.split.test {
        items.entry(a.language.clone()).or_default().push(a.article_id.clone());
    }
    let evaluators = parse_language_counts(&args.evaluators).map_err(|e| anyhow!(e))?;
    let pair = parse_pair(&args.pair)?;
    let assignments = build_ab_assignments(&items, &evaluators, pair, args.seed)?;

    let run = args.run.as_deref().map(MatrixOutput::read).transpose()?;
    let model = match (&args.model, &run) {
        (Some(m), _) => m.clone(),
        (None, Some(run)) => {
            run.cells.first().map(|c| c.model_id.clone()).ok_or_else(|| anyhow!("run has no cells"))?
        }
        (None, None) => ModelConfig::defaults()[0].id.clone(),
    };

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join(ASSIGNMENTS_FILE), serde_json::to_string_pretty(&assignments)? + "\n")?;
    write_jsonl(&args.out.join(PROVENANCE_FILE), &provenance(&assignments, &model))?;
    if let Some(run) = &run {
        let rationales: BTreeMap<(&str, PromptCondition), &str> = run
            .cells
            .iter()
            .filter(|c| c.model_id == model)
            .map(|c| ((c.article_id.as_str(), c.condition), c.assessment.rationale.as_str()))
            .collect();
        for a in &assignments {
            for i in &a.items {
                for c in [i.left, i.right] {
                    if !rationales.contains_key(&(i.item_id.as_str(), c)) {
                        bail!("run has no {c} output of {model} for {}", i.item_id);
                    }
                }
            }
        }
        let export = export_for_evaluators(
            &assignments,
            |id| sd.article(id).map(|a| a.article_text.clone()).unwrap_or_default(),
            |id, c| rationales[&(id, c)].to_string(),
        );
        write_jsonl(&args.out.join(EXPORT_FILE), &export)?;
    }
    for a in &assignments {
        println!("{} ({}): {} items", a.evaluator_id, a.language, a.items.len());
    }
    println!("assignments written to {}", args.out.display());
    Ok(())
}

pub fn ab_report(ratings: &Path, provenance: &Path, groups: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let report = ab_report_from(ratings, provenance, groups)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match out {
        Some(p) => {
            std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
            println!("A/B report written to {}", p.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

const SERVER_TEMPLATE: &str = "\
# Static session tokens. Ids are opaque and end up in the data store;
# keep the mapping from ids to people elsewhere.
concordance_threshold = 0.5
severity_vocabulary = []

# [[token]]
# token = \"<random secret>\"
# id = \"exp-01\"
# role = \"expert\"      # expert | evaluator | admin
";

pub struct PrepareArgs {
    pub data: PathBuf,
    pub split: PathBuf,
    pub bank: PathBuf,
    pub run: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub condition: PromptCondition,
    pub model: Option<String>,
    pub ab_export: Option<PathBuf>,
}

pub fn prepare_curation(args: &PrepareArgs) -> Result<()> {
    let sd = splitdir::read(&args.split)?;
    std::fs::create_dir_all(&args.data)?;
    std::fs::write(args.data.join(TEST_IDS_FILE), serde_json::to_string_pretty(&sd.split.test_ids())? + "\n")?;

    let config_path = args.data.join(CONFIG_FILE);
    if !config_path.exists() {
        let vocab = serde_json::to_string(&sd.meta.severity_vocabulary)?;
        std::fs::write(
            &config_path,
            SERVER_TEMPLATE.replace("severity_vocabulary = []", &format!("severity_vocabulary = {vocab}")),
        )?;
        println!("wrote {}; add session tokens before serving", config_path.display());
    }

    if args.data.join("bank").join("CURRENT").exists() {
        println!("a bank is already installed; leaving it in place");
    } else {
        let bank = ExemplarBank::load(&args.bank)?;
        let file = exbank_server::install_bank(&args.data, &bank)?;
        println!("installed bank {file}");
    }

    if let Some(run_dir) = &args.run {
        let run = MatrixOutput::read(run_dir)?;
        let extra = args.items.as_deref().map(read_items).transpose()?.unwrap_or_default();
        let text_of = |id: &str| {
            sd.article(id)
                .map(|a| a.article_text.clone())
                .or_else(|| extra.iter().find(|a| a.article_id == id).map(|a| a.article_text.clone()))
        };
        let model = args.model.clone().or_else(|| run.cells.first().map(|c| c.model_id.clone()));
        let test_ids = sd.split.test_ids();
        let mut queue = Vec::new();
        let mut held_out = 0;
        for c in run.cells.iter().filter(|c| c.condition == args.condition && Some(&c.model_id) == model.as_ref()) {
            let text = text_of(&c.article_id).ok_or_else(|| anyhow!("no text for article {}", c.article_id))?;
            held_out += usize::from(test_ids.contains(&c.article_id));
            queue.push(QueueItem {
                item_id: c.cell_id.clone(),
                article_id: c.article_id.clone(),
                language: c.language.clone(),
                article_text: text,
                assessment: c.assessment.clone(),
            });
        }
        write_jsonl(&args.data.join(QUEUE_FILE), &queue)?;
        println!("{} review items queued", queue.len());
        if held_out > 0 {
            log::warn!("{held_out} queued items review held-out test articles; the bank will refuse to admit them");
        }
    }
    if let Some(export) = &args.ab_export {
        std::fs::copy(export, args.data.join(EXPORT_FILE)).with_context(|| format!("copying {}", export.display()))?;
    }
    Ok(())
}

pub fn serve(data: &Path, bind: &str, port: u16, embed_url: Option<&str>) -> Result<()> {
    let pointer = data.join("bank").join("CURRENT");
    let embedder = if pointer.exists() {
        let file = std::fs::read_to_string(&pointer)?;
        let bank = ExemplarBank::load(&data.join("bank").join(file.trim()))?;
        Some(Arc::new(embedder_for_bank(&bank, embed_url)?))
    } else {
        None
    };
    let state = exbank_server::AppState::open(data, embedder)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind((bind, port)).await.with_context(|| format!("binding {bind}:{port}"))?;
        println!("serving {} on http://{}", data.display(), listener.local_addr()?);
        axum::serve(listener, exbank_server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
