//! Pooling-attention transformer backbone at desk scale.
//!
//! Everything is built on a small deterministic tensor engine with
//! reverse-mode differentiation, so gradients can be verified against
//! finite differences and runs reproduce bitwise.

pub mod backbone;
pub mod gradcheck;
pub mod hmr;
pub mod mixers;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Tape, VarId};
pub use tensor::{Real, Tensor};

/// Errors surfaced by tensor ops, model construction, and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
