//! Multi-domain CTR prediction with self-supervised latent domain mining.
//!
//! A vector-quantized autoencoder assigns every sample a latent domain index,
//! which routes it through stacked fusion layers of a shared network plus one
//! domain-specific affine map per mined domain. The crate also carries the
//! reverse-mode engine everything is built on, a synthetic multi-domain
//! benchmark, CSV ingestion, training, metrics and an analytical cost profiler.

pub mod admm;
pub mod data;
pub mod diffcore;
pub mod dmm;
pub mod error;
pub mod evalprof;
pub mod features;
pub mod layers;
pub mod trainer;

pub use error::{Error, Result};
