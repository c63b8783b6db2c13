//! Decoder-only multivariate forecasting with frequency-domain graph
//! learning, any-variate causal attention and channel-wise mixture of
//! experts.
//!
//! Module map:
//! - [`tensor`]: tensors, reverse-mode autodiff, FFT magnitudes, RNG
//! - [`tokenizer`]: instance normalization, patching, patch embedding
//! - [`graph_learning`]: spectral similarity and Gumbel adjacency sampling
//! - [`attention`]: Kronecker causal masks and any-variate attention
//! - [`moe`]: channel-wise routing, bias balancing, decoder layers
//! - [`model`]: model assembly, training pipelines, metrics, checkpoints
//! - [`data`]: CSV ingestion, synthetic series, splits, experiment config

pub mod attention;
pub mod data;
pub mod error;
pub mod graph_learning;
pub mod model;
pub mod moe;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
