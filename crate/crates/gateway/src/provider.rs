use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use exbank_core::corpus::NONE_LABEL;
use exbank_core::prompt::{parse_exemplar_blocks, render_answer, unescape_field};
use exbank_core::text::sha256_hex;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ModelConfig;
use crate::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub cell_id: String,
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub request_id: Option<String>,
}

/// Failure of one provider call.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderError {
    Status { code: u16, body: String },
    Transport(String),
}

impl ProviderError {
    /// 429, 5xx and transport errors are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            Self::Status { code, .. } => *code == 429 || (500..600).contains(code),
            Self::Transport(_) => true,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            Self::Status { code, .. } => Some(*code),
            Self::Transport(_) => None,
        }
    }
}

impl std::fmt::Display for ProviderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            Self::Transport(e) => write!(f, "transport error: {e}"),
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// OpenAI-style `/chat/completions` client with bearer auth.
pub struct HttpChatProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    token: String,
}

impl HttpChatProvider {
    /// Reads the token from the environment variable named in `config`.
    pub fn from_config(config: &ModelConfig) -> Result<Self, GatewayError> {
        let token = std::env::var(&config.auth_env)
            .ok()
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| GatewayError::AuthMissing(config.auth_env.clone()))?;
        Self::new(&config.base_url, &token)
    }

    pub fn new(base_url: &str, token: &str) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(Self { client, base_url: base_url.trim_end_matches('/').to_string(), token: token.to_string() })
    }
}

/// Extracts the first choice's message text and the response id.
pub fn parse_chat_response(body: &Value) -> Result<ChatResponse, ProviderError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Transport(format!("response lacks choices[0].message.content: {body}")))?;
    Ok(ChatResponse { text: text.to_string(), request_id: body.get("id").and_then(Value::as_str).map(String::from) })
}

impl ChatProvider for HttpChatProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let response = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Status { code: status.as_u16(), body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Transport(e.to_string()))?;
        parse_chat_response(&value)
    }
}

/// Sends each request to the endpoint configured for its model.
pub struct ModelRouter {
    routes: HashMap<String, (String, HttpChatProvider)>,
}

impl ModelRouter {
    pub fn from_configs(configs: &[ModelConfig]) -> Result<Self, GatewayError> {
        let mut routes: HashMap<String, (String, HttpChatProvider)> = HashMap::new();
        for cfg in configs {
            if let Some((base, _)) = routes.get(&cfg.model) {
                if *base != cfg.base_url {
                    return Err(GatewayError::InvalidConfig(format!("model {} is mapped to two endpoints", cfg.model)));
                }
                continue;
            }
            routes.insert(cfg.model.clone(), (cfg.base_url.clone(), HttpChatProvider::from_config(cfg)?));
        }
        Ok(Self { routes })
    }
}

impl ChatProvider for ModelRouter {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        match self.routes.get(&request.model) {
            Some((_, provider)) => provider.complete(request),
            None => Err(ProviderError::Status { code: 400, body: format!("no endpoint for model {}", request.model) }),
        }
    }
}

/// Offline provider: scripted replies by cell id, else an echo heuristic.
///
/// The echo answer copies the severity of the first exemplar in the prompt
/// (or picks one from the vocabulary by hashing the prompt when there are
/// none) and quotes the opening words of the item as its span.
pub struct MockProvider {
    script: HashMap<String, String>,
    vocabulary: Vec<String>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(vocabulary: Vec<String>) -> Self {
        Self { script: HashMap::new(), vocabulary, calls: AtomicUsize::new(0) }
    }

    pub fn scripted(script: HashMap<String, String>, vocabulary: Vec<String>) -> Self {
        Self { script, vocabulary, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn echo(&self, prompt: &str) -> String {
        let item = prompt
            .rfind("<ITEM>")
            .and_then(|i| {
                let rest = &prompt[i..];
                let start = rest.find("<TEXT>")? + "<TEXT>".len();
                let end = rest.find("</TEXT>")?;
                Some(unescape_field(rest[start..end].trim()))
            })
            .unwrap_or_default();
        let digest = sha256_hex(prompt.as_bytes());
        let pick = u64::from_str_radix(&digest[..8], 16).unwrap_or(0) as usize;
        let severity = match parse_exemplar_blocks(prompt).first() {
            Some(first) => first.severity.clone(),
            None if self.vocabulary.is_empty() || pick.is_multiple_of(self.vocabulary.len() + 1) => {
                NONE_LABEL.to_string()
            }
            None => self.vocabulary[pick % (self.vocabulary.len() + 1) - 1].clone(),
        };
        if severity == NONE_LABEL {
            return render_answer(NONE_LABEL, &[], "");
        }
        let words: Vec<&str> = item.split_whitespace().take(3).collect();
        let spans = if words.is_empty() { Vec::new() } else { vec![words.join(" ")] };
        render_answer(&severity, &spans, &format!("The passage frames events through {}.", words.join(" ")))
    }
}

impl ChatProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        let text = match self.script.get(&request.cell_id) {
            Some(text) => text.clone(),
            None => self.echo(&request.prompt),
        };
        Ok(ChatResponse { text, request_id: Some(format!("mock-{n}")) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use exbank_core::prompt::{parse_model_output, ParseStatus};

    fn request(cell: &str, prompt: &str) -> ChatRequest {
        ChatRequest { cell_id: cell.into(), model: "m".into(), prompt: prompt.into(), temperature: 0.0, max_tokens: 10 }
    }

    #[test]
    fn scripted_reply_is_verbatim() {
        let script = [("a::B0::m".to_string(), "  exact <reply>\n".to_string())].into();
        let mock = MockProvider::scripted(script, vec![]);
        assert_eq!(mock.complete(&request("a::B0::m", "p")).unwrap().text, "  exact <reply>\n");
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn echo_answers_parse_cleanly() {
        let vocab = vec!["low".to_string(), "high".to_string()];
        let mock = MockProvider::new(vocab.clone());
        for i in 0..20 {
            let prompt = format!("instructions\n\n<ITEM>\n<TEXT>\nword{i} two three four\n</TEXT>\n</ITEM>\n");
            let reply = mock.complete(&request("c", &prompt)).unwrap().text;
            let parsed = parse_model_output(&reply, &vocab);
            assert_eq!(parsed.parse_status, ParseStatus::Clean, "{reply}");
            if !parsed.is_none_label() {
                assert_eq!(parsed.spans, [format!("word{i} two three")]);
            }
            assert_eq!(reply, mock.complete(&request("c", &prompt)).unwrap().text);
        }
    }

    #[test]
    fn transient_classification() {
        assert!(ProviderError::Status { code: 429, body: String::new() }.is_transient());
        assert!(ProviderError::Status { code: 503, body: String::new() }.is_transient());
        assert!(!ProviderError::Status { code: 401, body: String::new() }.is_transient());
        assert!(ProviderError::Transport("reset".into()).is_transient());
    }

    #[test]
    fn response_parsing() {
        let body = json!({"id": "gen-1", "choices": [{"message": {"role": "assistant", "content": "hi"}}]});
        assert_eq!(
            parse_chat_response(&body).unwrap(),
            ChatResponse { text: "hi".into(), request_id: Some("gen-1".into()) }
        );
        assert!(parse_chat_response(&json!({"choices": []})).is_err());
    }

    #[test]
    fn missing_token_is_reported() {
        let mut cfg = ModelConfig::mixtral_8x22b();
        cfg.auth_env = "EXBANK_TEST_TOKEN_THAT_IS_NOT_SET".into();
        assert!(matches!(HttpChatProvider::from_config(&cfg), Err(GatewayError::AuthMissing(_))));
    }
}
