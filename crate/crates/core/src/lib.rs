//! Partial-noising continuous diffusion for multi-view shape captioning.
//!
//! Views (symbolic patch grids) and captions share one latent space. Only the
//! caption segment is diffused; the clean image segment conditions a small
//! bidirectional transformer that predicts `x_0`. Per view, several sampled
//! captions are reduced by minimum-Bayes-risk selection, and the selected
//! caption latents of all views are pooled and rounded into one caption.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoding;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod metrics;
pub(crate) mod nn;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
