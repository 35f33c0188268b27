//! `server.toml`: static session tokens and curation settings.
//!
//! ```toml
//! concordance_threshold = 0.5
//! severity_vocabulary = ["low", "medium", "high"]
//!
//! [[token]]
//! token = "…"
//! id = "exp-01"
//! role = "expert"
//! ```

use std::path::Path;

use exbank_core::curation::{CurationConfig, DEFAULT_CONCORDANCE_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::ServerError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Expert,
    Evaluator,
    /// An expert who may also rebuild the bank.
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrant {
    pub token: String,
    /// Opaque id recorded in the data store.
    pub id: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_threshold")]
    pub concordance_threshold: f64,
    #[serde(default)]
    pub severity_vocabulary: Vec<String>,
    #[serde(default, rename = "token")]
    pub tokens: Vec<TokenGrant>,
}

fn default_threshold() -> f64 {
    DEFAULT_CONCORDANCE_THRESHOLD
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            concordance_threshold: DEFAULT_CONCORDANCE_THRESHOLD,
            severity_vocabulary: Vec::new(),
            tokens: Vec::new(),
        }
    }
}

impl ServerConfig {
    pub fn parse(text: &str) -> Result<Self, ServerError> {
        let config: Self = toml::from_str(text).map_err(|e| ServerError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        if !(0.0..=1.0).contains(&self.concordance_threshold) {
            return Err(ServerError::Config(format!(
                "concordance_threshold {} is outside [0, 1]",
                self.concordance_threshold
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for grant in &self.tokens {
            if grant.token.len() < 8 {
                return Err(ServerError::Config(format!("token for {} is shorter than 8 characters", grant.id)));
            }
            if grant.id.trim().is_empty() {
                return Err(ServerError::Config("token grant with an empty id".into()));
            }
            if !seen.insert(grant.token.as_str()) {
                return Err(ServerError::Config(format!("token for {} is listed twice", grant.id)));
            }
        }
        Ok(())
    }

    pub fn curation(&self) -> CurationConfig {
        CurationConfig {
            concordance_threshold: self.concordance_threshold,
            severity_vocabulary: self.severity_vocabulary.clone(),
        }
    }

    pub fn grant(&self, token: &str) -> Option<&TokenGrant> {
        self.tokens.iter().find(|g| g.token == token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tokens() {
        let config = ServerConfig::parse(
            r#"
severity_vocabulary = ["low", "high"]
[[token]]
token = "aaaaaaaa"
id = "exp-01"
role = "expert"
[[token]]
token = "bbbbbbbb"
id = "ev-fa-01"
role = "evaluator"
"#,
        )
        .unwrap();
        assert_eq!(config.concordance_threshold, 0.5);
        assert_eq!(config.grant("bbbbbbbb").unwrap().role, Role::Evaluator);
        assert!(config.grant("cccccccc").is_none());
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(ServerConfig::parse("concordance_threshold = 1.5").is_err());
        assert!(ServerConfig::parse("[[token]]\ntoken = \"short\"\nid = \"x\"\nrole = \"expert\"").is_err());
        let dup = "[[token]]\ntoken = \"aaaaaaaa\"\nid = \"x\"\nrole = \"expert\"\n[[token]]\ntoken = \"aaaaaaaa\"\nid = \"y\"\nrole = \"admin\"";
        assert!(ServerConfig::parse(dup).is_err());
    }
}
