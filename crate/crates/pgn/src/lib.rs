//! Perceptual gradient networks (PGNs).
//!
//! A perceptual loss compares two images through the activations of a fixed
//! convolutional feature network (the *teacher*). Optimizing it requires a
//! forward-backward pass through that network at every step. A PGN replaces
//! the forward-backward pass with a single forward pass of a small
//! image-to-image network that maps the pair `(yhat, y)` directly to an
//! approximation of the gradient of the perceptual loss with respect to
//! `yhat`.
//!
//! The crate contains the whole pipeline at desk scale:
//!
//! * [`teacher`] — the differentiable feature network defining the loss and
//!   its exact input gradient,
//! * [`heads`] — the four gradient-synthesis constructions (direct,
//!   unconstrained proxy, constrained proxy, hybrid),
//! * [`networks`] — ResNet/UNet backbones, surrogate autoencoders and the
//!   single-image fitting generator,
//! * [`trainer`] — the autoencoder-surrogate distillation loop with the
//!   meta-loss and plateau-triggered resets,
//! * [`fit`] — single-image fitting driven by synthetic gradients, with
//!   divergence/stagnation classification,
//! * [`perf`] — analytic parameter/MACs counting and wall-time/memory
//!   measurement,
//! * [`config`] — run configuration for the `pgn` command-line tool.

pub mod config;
pub mod data;
pub mod fit;
pub mod heads;
pub mod networks;
pub mod nn;
pub mod perf;
pub mod teacher;
pub mod trainer;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A configuration value is missing, malformed, or out of range.
    #[error("configuration error: {0}")]
    Config(String),
    /// A non-finite value made further computation meaningless.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A checkpoint file is missing, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
