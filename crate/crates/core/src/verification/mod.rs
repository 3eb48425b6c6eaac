//! Lossless tree verification and the speculative generation loop.

mod engine;
mod verify;

pub use engine::{generate, vanilla_generate, GenerateConfig, GenerateError, Generation, StepStats};
pub use verify::{commit, sample_index, target_probs, verify_greedy, verify_stochastic, VerifyResult};
