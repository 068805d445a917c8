//! Active sequential measurement selection for image recovery.
//!
//! The pieces: a β-VAE whose encoder has a measurement-conditioned partial
//! variant ([`models`]), a convolutional Hadamard measurement basis
//! ([`basis`]), per-instance stochastic variational inference ([`svi`]), and
//! a greedy acquisition loop ([`engine`]) that scores every unmeasured
//! pattern under one of three criteria (likelihood, entropy reduction, or
//! raw coefficient magnitude) and measures the winner.
//!
//! Everything runs on 64-bit floats through a small dense tensor kernel
//! ([`nn`]) with reverse-mode gradients; no external ML runtime is involved.

pub mod basis;
pub mod data;
pub mod engine;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod svi;
pub mod tensor;
pub mod training;
pub mod util;

/// Crate-wide error type. Variants are grouped so callers (the CLI in
/// particular) can map them onto exit classes: configuration, data, or
/// numerical failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate pattern index {0}")]
    DuplicateIndex(usize),
    #[error("measurement noise is zero but the measurement set is non-empty; the likelihood is degenerate")]
    DegenerateLikelihood,
    #[error("basis fingerprint mismatch: network bundle has {bundle}, measurement set has {set}")]
    FingerprintMismatch { bundle: String, set: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("idx data: {0}")]
    Idx(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
