//! Embedding provider and rationale scorer selection.

use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use exbank_core::bank::ExemplarBank;
use exbank_core::embed::{Embedder, HashedNgramEmbedder, DEFAULT_HASHED_DIMENSION, DEFAULT_NGRAM};
use exbank_core::metrics::{EmbeddingCosineScorer, RationaleScorer};
use exbank_gateway::services::{HttpEmbeddingProvider, HttpRationaleScorer};

pub const EMBED_TOKEN_ENV: &str = "EXBANK_EMBED_TOKEN";
pub const SCORER_TOKEN_ENV: &str = "EXBANK_SCORER_TOKEN";

fn token(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|t| !t.trim().is_empty())
}

/// `hashed`, `hashed:d=<dim>`, or an embeddings endpoint base URL.
pub fn embedder_from_spec(spec: &str, model: Option<&str>, dimension: Option<usize>) -> Result<Embedder> {
    if let Some(rest) = spec.strip_prefix("hashed") {
        let dim = match rest.strip_prefix(":d=") {
            Some(d) => d.parse().with_context(|| format!("bad dimension in {spec:?}"))?,
            None if rest.is_empty() => DEFAULT_HASHED_DIMENSION,
            None => bail!("unknown provider {spec:?}"),
        };
        if dim == 0 {
            bail!("dimension must be positive");
        }
        return Ok(Embedder::new(Arc::new(HashedNgramEmbedder::new(DEFAULT_NGRAM, dim))));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        let model = model.ok_or_else(|| anyhow!("--embed-model is required for an HTTP provider"))?;
        let dim = dimension.ok_or_else(|| anyhow!("--embed-dim is required for an HTTP provider"))?;
        return Ok(Embedder::new(Arc::new(HttpEmbeddingProvider::new(spec, model, dim, token(EMBED_TOKEN_ENV)))));
    }
    bail!("unknown provider {spec:?}; use hashed, hashed:d=<n> or an http(s) URL")
}

/// The embedder a bank was built with. HTTP-built banks need the endpoint URL.
pub fn embedder_for_bank(bank: &ExemplarBank, embed_url: Option<&str>) -> Result<Embedder> {
    let id = bank.provider_id();
    if let Some(hashed) = HashedNgramEmbedder::from_id(id) {
        return Ok(Embedder::new(Arc::new(hashed)));
    }
    if let Some(rest) = id.strip_prefix("http:") {
        let (model, dim) = rest.rsplit_once(":d=").ok_or_else(|| anyhow!("unrecognized provider id {id:?}"))?;
        let url = embed_url.ok_or_else(|| anyhow!("bank was built with {id}; pass --embed-url"))?;
        let dim = dim.parse().with_context(|| format!("unrecognized provider id {id:?}"))?;
        return Ok(Embedder::new(Arc::new(HttpEmbeddingProvider::new(url, model, dim, token(EMBED_TOKEN_ENV)))));
    }
    bail!("unrecognized provider id {id:?}")
}

/// Embedding cosine over the offline embedder unless an external scorer URL is given.
pub fn rationale_scorer(scorer_url: Option<&str>) -> Box<dyn RationaleScorer> {
    match scorer_url {
        Some(url) => Box::new(HttpRationaleScorer::new(url, token(SCORER_TOKEN_ENV))),
        None => Box::new(EmbeddingCosineScorer::new(Arc::new(Embedder::new(Arc::new(HashedNgramEmbedder::new(
            DEFAULT_NGRAM,
            DEFAULT_HASHED_DIMENSION,
        )))))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_specs() {
        assert_eq!(embedder_from_spec("hashed", None, None).unwrap().provider_id(), "hashed-ngram-v1:n=3:d=512");
        assert_eq!(embedder_from_spec("hashed:d=64", None, None).unwrap().provider_id(), "hashed-ngram-v1:n=3:d=64");
        assert!(embedder_from_spec("hashed:d=0", None, None).is_err());
        assert!(embedder_from_spec("sbert", None, None).is_err());
        assert!(embedder_from_spec("http://localhost:1", None, Some(4)).is_err());
        let http = embedder_from_spec("http://localhost:1", Some("m"), Some(4)).unwrap();
        assert_eq!(http.provider_id(), "http:m:d=4");
    }
}
