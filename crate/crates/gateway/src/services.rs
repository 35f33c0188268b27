//! HTTP-backed embedding provider and external rationale scorer.

use std::time::Duration;

use exbank_core::embed::{EmbedError, EmbeddingProvider};
use exbank_core::metrics::{MetricError, RationaleScorer};
use serde_json::{json, Value};

fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder().timeout(Duration::from_secs(120)).build().expect("static client configuration")
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    token: Option<&str>,
    body: &Value,
) -> Result<Value, String> {
    let mut req = client.post(url).json(body);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().map_err(|e| e.to_string())?;
    let status = resp.status();
    let text = resp.text().map_err(|e| e.to_string())?;
    if !status.is_success() {
        return Err(format!("HTTP {}: {text}", status.as_u16()));
    }
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbeddingProvider {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    id: String,
    dimension: usize,
    token: Option<String>,
    batch_limit: usize,
    max_chars: Option<usize>,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: &str, model: &str, dimension: usize, token: Option<String>) -> Self {
        Self {
            client: client(),
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_string(),
            id: format!("http:{model}:d={dimension}"),
            dimension,
            token,
            batch_limit: 64,
            max_chars: Some(8_000),
        }
    }

    pub fn with_limits(mut self, batch_limit: usize, max_chars: Option<usize>) -> Self {
        self.batch_limit = batch_limit.max(1);
        self.max_chars = max_chars;
        self
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn batch_limit(&self) -> usize {
        self.batch_limit
    }

    fn max_chars(&self) -> Option<usize> {
        self.max_chars
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let body = json!({"model": self.model, "input": texts});
        let value = post_json(&self.client, &self.url, self.token.as_deref(), &body)
            .map_err(EmbedError::ProviderUnavailable)?;
        let data = value
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::ProviderUnavailable("response lacks data[]".into()))?;
        let mut rows: Vec<(usize, Vec<f32>)> = Vec::with_capacity(data.len());
        for (pos, row) in data.iter().enumerate() {
            let index = row.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector = row
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| EmbedError::ProviderUnavailable("row lacks embedding[]".into()))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| EmbedError::ProviderUnavailable("non-numeric embedding value".into()))?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// External similarity service: `{"candidates": [...], "references": [...]}`
/// in, `{"f1": [...]}` out, one F-measure per pair.
pub struct HttpRationaleScorer {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpRationaleScorer {
    pub fn new(url: &str, token: Option<String>) -> Self {
        Self { client: client(), url: url.to_string(), token }
    }
}

impl RationaleScorer for HttpRationaleScorer {
    fn id(&self) -> String {
        format!("external:{}", self.url)
    }

    fn score(&self, pred: &str, gold: &str) -> Result<f64, MetricError> {
        let scores = self.score_batch(&[(pred.to_string(), gold.to_string())])?;
        Ok(scores[0])
    }

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, MetricError> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({
            "candidates": pairs.iter().map(|p| &p.0).collect::<Vec<_>>(),
            "references": pairs.iter().map(|p| &p.1).collect::<Vec<_>>(),
        });
        let value =
            post_json(&self.client, &self.url, self.token.as_deref(), &body).map_err(MetricError::ScorerUnavailable)?;
        let scores: Vec<f64> = value
            .get("f1")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        if scores.len() != pairs.len() {
            return Err(MetricError::ScorerUnavailable(format!(
                "expected {} scores, got {}",
                pairs.len(),
                scores.len()
            )));
        }
        Ok(scores)
    }
}
