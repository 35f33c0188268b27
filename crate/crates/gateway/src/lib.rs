//! Model access for the prompt-condition experiments.
//!
//! [`Gateway::generate`] sends one rendered prompt to a chat-completion
//! endpoint through an append-only cache, and [`run_matrix`] drives every
//! (item × condition × model) cell with bounded concurrency.

pub mod cache;
pub mod config;
pub mod generate;
pub mod matrix;
pub mod provider;
pub mod services;

pub use cache::{cache_key, GenerationCache, GenerationRecord};
pub use config::{load_models, ModelConfig};
pub use generate::{Gateway, RetryPolicy, Sleeper};
pub use matrix::{run_matrix, CellFailure, CellResult, MatrixOutput, MatrixSpec, RunManifest, DEFAULT_CONCURRENCY};
pub use provider::{
    ChatProvider, ChatRequest, ChatResponse, HttpChatProvider, MockProvider, ModelRouter, ProviderError,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("environment variable {0} holds no API token")]
    AuthMissing(String),
    #[error("request failed after {attempts} attempt(s): {message}")]
    PermanentFailure { status: Option<u16>, attempts: u32, message: String },
    #[error("prompt needs ~{prompt_tokens} tokens, budget is {budget}")]
    ContextOverflow { prompt_tokens: usize, budget: usize },
    #[error("generation cache: {0}")]
    Cache(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
