use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::GatewayError;

pub const DEFAULT_BASE_URL: &str = "https://openrouter.ai/api/v1";
pub const DEFAULT_AUTH_ENV: &str = "OPENROUTER_API_KEY";
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

/// One chat-completion endpoint and its generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Short id used in cell ids and reports.
    pub id: String,
    /// Model name sent to the endpoint.
    pub model: String,
    pub context_budget: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
}

fn default_max_output() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}

fn default_base_url() -> String {
    DEFAULT_BASE_URL.into()
}

fn default_auth_env() -> String {
    DEFAULT_AUTH_ENV.into()
}

impl ModelConfig {
    pub fn new(id: &str, model: &str, context_budget: usize) -> Self {
        Self {
            id: id.into(),
            model: model.into(),
            context_budget,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            base_url: default_base_url(),
            auth_env: default_auth_env(),
        }
    }

    pub fn llama4_maverick() -> Self {
        Self::new("llama-4-maverick", "meta-llama/llama-4-maverick", 1_050_000)
    }

    pub fn mixtral_8x22b() -> Self {
        Self::new("mixtral-8x22b", "mistralai/mixtral-8x22b-instruct", 65_500)
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::llama4_maverick(), Self::mixtral_8x22b()]
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidConfig(m));
        if self.id.is_empty() || self.id.contains("::") {
            return bad(format!("model id {:?} must be non-empty and free of '::'", self.id));
        }
        if self.context_budget == 0 {
            return bad(format!("{}: context budget must be positive", self.id));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("{}: temperature {} is invalid", self.id, self.temperature));
        }
        if self.temperature != 0.0 {
            log::warn!("{}: temperature {} makes generations non-deterministic", self.id, self.temperature);
        }
        if self.max_output_tokens == 0 {
            return bad(format!("{}: max output tokens must be positive", self.id));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct ModelFile {
    model: Vec<ModelConfig>,
}

/// Reads `[[model]]` tables from a TOML file.
pub fn load_models(path: &Path) -> Result<Vec<ModelConfig>, GatewayError> {
    let raw =
        std::fs::read_to_string(path).map_err(|e| GatewayError::InvalidConfig(format!("{}: {e}", path.display())))?;
    let file: ModelFile = toml::from_str(&raw).map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for m in &file.model {
        m.validate()?;
        if !seen.insert(m.id.clone()) {
            return Err(GatewayError::InvalidConfig(format!("duplicate model id {}", m.id)));
        }
    }
    Ok(file.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let [llama, mixtral] = <[ModelConfig; 2]>::try_from(ModelConfig::defaults()).unwrap();
        assert_eq!(llama.context_budget, 1_050_000);
        assert_eq!(mixtral.context_budget, 65_500);
        for m in [&llama, &mixtral] {
            assert_eq!(m.temperature, 0.0);
            assert_eq!(m.max_output_tokens, 1024);
            assert_eq!(m.auth_env, "OPENROUTER_API_KEY");
            m.validate().unwrap();
        }
    }

    #[test]
    fn load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.toml");
        std::fs::write(&path, "[[model]]\nid = \"small\"\nmodel = \"x/y\"\ncontext_budget = 100\n").unwrap();
        let models = load_models(&path).unwrap();
        assert_eq!(models[0].base_url, DEFAULT_BASE_URL);
        assert_eq!(models[0].temperature, 0.0);

        std::fs::write(&path, "[[model]]\nid = \"small\"\nmodel = \"x/y\"\ncontext_budget = 0\n").unwrap();
        assert!(matches!(load_models(&path), Err(GatewayError::InvalidConfig(_))));
        let mut bad = ModelConfig::mixtral_8x22b();
        bad.id = "a::b".into();
        assert!(bad.validate().is_err());
    }
}
