mod commands;
mod providers;
mod splitdir;

use std::path::PathBuf;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use exbank_core::prompt::PromptCondition;

use crate::commands::{AssignmentArgs, EvaluateArgs, PrepareArgs, PromptInputs, RunArgs};

/// Retrieval-augmented annotation experiments over a curated exemplar bank.
#[derive(Parser)]
#[command(name = "exbank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic annotation corpus for offline runs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "fa,it")]
        languages: Vec<String>,
        #[arg(long, default_value_t = 300)]
        per_language: usize,
        #[arg(long, default_value_t = 0.1)]
        edge_rate: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Clean an annotation export and split it into bank and test sets.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// TOML field mapping; defaults to the JSONL layout.
        #[arg(long)]
        format: Option<PathBuf>,
        /// Held-out articles per language, e.g. `fa=100,it=100`.
        #[arg(long, default_value = "fa=100,it=100")]
        holdout: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed the bank side of a split.
    BuildBank {
        #[arg(long)]
        split: PathBuf,
        /// `hashed`, `hashed:d=<n>` or an embeddings endpoint URL.
        #[arg(long, default_value = "hashed")]
        provider: String,
        #[arg(long)]
        embed_model: Option<String>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the nearest same-language exemplars for an article.
    Retrieve {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        query_id: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        embed_url: Option<String>,
    },
    /// Print the prompt one cell would send.
    Render {
        #[arg(long)]
        condition: PromptCondition,
        #[arg(long)]
        article_id: String,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long = "static")]
        statics: Option<PathBuf>,
        /// Model registry (TOML); defaults to the built-in pair.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        embed_url: Option<String>,
    },
    /// Run the condition by model matrix.
    Run {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// JSONL of {article_id, language, article_text} to use instead of the test set.
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long, default_value = "B0,B1,M1,A1")]
        conditions: String,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// `mock` or `http`.
        #[arg(long, default_value = "mock")]
        provider: String,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long = "static")]
        statics: Option<PathBuf>,
        #[arg(long)]
        embed_url: Option<String>,
    },
    /// Score a run against the held-out references.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scorer_url: Option<String>,
        /// Annotator metadata keys to break disparities down by; all keys when omitted.
        #[arg(long = "annotator-key")]
        annotator_keys: Vec<String>,
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        provenance: Option<PathBuf>,
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Build blinded A/B evaluator assignments.
    Assignments {
        #[arg(long)]
        split: PathBuf,
        /// Evaluators per language, e.g. `fa=5,it=5`.
        #[arg(long, default_value = "fa=5,it=5")]
        evaluators: String,
        #[arg(long, default_value = "B1:M1")]
        pair: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Run directory whose rationales fill the evaluator export.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unblind and aggregate A/B ratings.
    AbReport {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        provenance: PathBuf,
        /// JSON object of evaluator id to group key/value pairs.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Set up a curation data directory from a run.
    PrepareCuration {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long, default_value = "A1")]
        condition: PromptCondition,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        ab_export: Option<PathBuf>,
    },
    /// Serve the curation and rating API.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        embed_url: Option<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { out, languages, per_language, edge_rate, seed } => {
            commands::synth(&out, languages, per_language, edge_rate, seed)
        }
        Command::Ingest { corpus, format, holdout, seed, out } => {
            commands::ingest(&corpus, format.as_deref(), &holdout, seed, &out)
        }
        Command::BuildBank { split, provider, embed_model, embed_dim, out } => {
            commands::build_bank(&split, &provider, embed_model.as_deref(), embed_dim, &out)
        }
        Command::Retrieve { bank, split, query_id, k, embed_url } => {
            commands::retrieve_cmd(&bank, split.as_deref(), &query_id, k, embed_url.as_deref())
        }
        Command::Render { condition, article_id, split, bank, k, templates, statics, models, model, embed_url } => {
            commands::render(
                condition,
                &article_id,
                &split,
                bank.as_deref(),
                k,
                &PromptInputs { templates, statics },
                models.as_deref(),
                model.as_deref(),
                embed_url.as_deref(),
            )
        }
        Command::Run {
            split,
            bank,
            items,
            conditions,
            models,
            k,
            out,
            provider,
            cache,
            concurrency,
            templates,
            statics,
            embed_url,
        } => commands::run(&RunArgs {
            split,
            bank,
            items,
            conditions: PromptCondition::parse_list(&conditions).map_err(|e| anyhow!(e))?,
            models,
            k,
            out,
            provider,
            cache,
            concurrency,
            prompt_inputs: PromptInputs { templates, statics },
            embed_url,
        }),
        Command::Evaluate { run, split, out, scorer_url, annotator_keys, ratings, provenance, groups } => {
            commands::evaluate(&EvaluateArgs {
                run,
                split,
                out,
                scorer_url,
                annotator_keys,
                ratings,
                provenance,
                groups,
            })
        }
        Command::Assignments { split, evaluators, pair, seed, run, model, out } => {
            commands::assignments(&AssignmentArgs { split, evaluators, pair, seed, run, model, out })
        }
        Command::AbReport { ratings, provenance, groups, out } => {
            commands::ab_report(&ratings, &provenance, groups.as_deref(), out.as_deref())
        }
        Command::PrepareCuration { data, split, bank, run, items, condition, model, ab_export } => {
            commands::prepare_curation(&PrepareArgs { data, split, bank, run, items, condition, model, ab_export })
        }
        Command::Serve { data, bind, port, embed_url } => commands::serve(&data, &bind, port, embed_url.as_deref()),
    }
}
