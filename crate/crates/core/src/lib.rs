//! Speculative decoding with a feature-sampling draft head.
//!
//! The crate contains everything needed to run the method end to end on a
//! laptop: a small reverse-mode tensor library, a decoder-only target model,
//! the draft stack (feature sampler + one decoder layer with a split MLP
//! output), dynamic token-tree drafting, lossless verification, training
//! loops and a benchmark harness.

pub mod bench;
pub mod drafting;
pub mod error;
pub mod models;
pub mod tensor;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
