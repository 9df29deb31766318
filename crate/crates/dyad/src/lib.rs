//! Joint latent dynamics of two interacting agents.
//!
//! `dyad` learns a shared probabilistic model of a two-party interaction from
//! demonstrations: each agent's windowed observations are compressed by a
//! variational autoencoder with a full-covariance Gaussian posterior, and a
//! hidden semi-Markov model (one per interaction class) is fitted over the
//! concatenated latent trajectories of both agents. At run time the model
//! observes one agent, encodes it, conditions the semi-Markov mixture with
//! Gaussian mixture regression to infer the other agent's latent trajectory,
//! and decodes it back to the observation space.
//!
//! The crate is organized bottom-up:
//!
//! * [`numkit`] — dense matrices, Cholesky factorization, triangular solves,
//!   seeded randomness.
//! * [`gauss`] — multivariate Gaussians: log-density, marginals, block
//!   conditioning, closed-form KL divergence.
//! * [`nnet`] — plain feedforward networks with reverse-mode gradients and
//!   an AdamW optimizer.
//! * [`hsmm`] — hidden semi-Markov models over the joint latent space:
//!   temporal-split initialization, EM, duration-aware forward inference,
//!   mixture regression.
//! * [`vae`] — per-agent encoder/decoder with Cholesky-parameterized
//!   posterior and the mixture-prior training objective.
//! * [`dataio`] — dataset text format, window stacking, alignment,
//!   smoothing, and a synthetic two-agent interaction generator.
//! * [`pipeline`] — the training loop, conditional generation, and
//!   checkpoint persistence.

pub mod dataio;
pub mod gauss;
pub mod hsmm;
pub mod nnet;
pub mod numkit;
pub mod pipeline;
pub mod vae;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("triangular matrix is singular (zero diagonal at index {0})")]
    SingularMatrix(usize),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("observed block covariance is not positive definite")]
    SingularBlock,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty observation sequence")]
    EmptySequence,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class {0:?} has no demonstrations")]
    EmptyClass(String),
    #[error("unknown class {class:?}; known classes: {known:?}")]
    UnknownClass { class: String, known: Vec<String> },
    #[error("non-finite loss at epoch {epoch} (class {class:?})")]
    NonFiniteLoss { epoch: usize, class: String },
    #[error("parse error at {path}:{line}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("window length {window} exceeds sequence length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("checkpoint version {got} unsupported (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("checkpoint checksum mismatch (file corrupt or truncated)")]
    CorruptChecksum,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
