//! Graph-token language modeling with reconstructive objectives.
//!
//! The crate serializes text-attributed graphs into fixed-length token
//! sequences, feeds them as prefix tokens to a small causal transformer,
//! and trains jointly with a text loss plus one of three graph
//! reconstruction losses (decoder, similarizer, denoiser). A discrete
//! information oracle checks the mutual-information identities the
//! training objective rests on.

pub mod autodiff;
pub mod gnn;
pub mod harness;
pub mod heads;
pub mod info;
pub mod lm;
pub mod ndt;
pub mod opt;
pub mod tag;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config/parameter problems exit 2, numeric failures exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
