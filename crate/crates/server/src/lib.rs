//! HTTP service for the expert curation loop and blinded A/B rating.
//!
//! State lives in a data directory (see [`store`]); [`router`] exposes it as
//! a JSON API guarded by static bearer tokens.

pub mod api;
pub mod config;
pub mod store;

pub use api::router;
pub use config::{Role, ServerConfig, TokenGrant};
pub use store::{install_bank, AppState, Principal};

use exbank_core::ab::AbError;
use exbank_core::bank::BankError;
use exbank_core::curation::CurationError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("missing or unknown session token")]
    Unauthorized,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("busy: {0}")]
    Busy(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Ab(#[from] AbError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("i/o: {0}")]
    Io(String),
}
