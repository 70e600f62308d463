//! Vector-quantization toolkit built around large semantically-clustered
//! codebooks.
//!
//! The pipeline: cluster an embedding corpus into a K-entry codebook with
//! two-stage k-means ([`cluster`]), quantize embeddings against a frozen
//! codebook paired with a trainable embedding table ([`quantize`]), and
//! score the result with utilization / entropy / distortion diagnostics
//! ([`metrics`]). [`train`] holds the toy contrastive trainer for the
//! trainable table and a partial-update VQ baseline that demonstrates
//! codebook collapse. [`io`] defines the on-disk formats and [`synth`]
//! generates seeded Gaussian-mixture corpora for experiments.

pub mod cluster;
pub mod dist;
pub mod error;
pub mod io;
pub mod metrics;
pub mod quantize;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
