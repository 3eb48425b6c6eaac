//! Target transformer, draft stack and their on-disk format.
//!
//! The target is a small pre-norm decoder (RMSNorm, rotary attention, SiLU
//! gated MLP). Its *feature* is the hidden state entering the final norm and
//! LLM head. The draft stack turns `(feature, next-token embedding)` pairs
//! into draft inputs through a connector and runs one decoder layer whose
//! MLP may emit two halves: one feeding the shared head, one fed back as the
//! next step's feature.

mod checkpoint;
mod draft;
mod layers;
mod target;

pub use checkpoint::{load_draft, load_target, read_tensors, save_draft, save_target, write_tensors};
pub use draft::{Connector, DraftModel, DraftStack, DraftStep, FeatureSampler, LinearConnector};
pub use layers::{Attention, DecoderLayer, KvCache, Mlp};
pub use target::{TargetModel, TargetOutput};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    /// Target depth; the draft always has one layer.
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            hidden_size: 128,
            intermediate_size: 384,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 512,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden_size == 0 || self.n_heads == 0 {
            return bad("vocab_size, hidden_size and n_heads must be positive".into());
        }
        if self.n_layers == 0 || self.max_seq_len == 0 {
            return bad("n_layers and max_seq_len must be positive".into());
        }
        if self.hidden_size % self.n_heads != 0 {
            return bad(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            ));
        }
        if (self.hidden_size / self.n_heads) % 2 != 0 {
            return bad("head dimension must be even for rotary embedding".into());
        }
        if self.intermediate_size < self.hidden_size {
            return bad(format!(
                "intermediate_size {} must be >= hidden_size {}",
                self.intermediate_size, self.hidden_size
            ));
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }
}

/// Draft-stack architecture variants used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Feature sampler connector and split (doubled) MLP output.
    Fspad,
    /// Linear connector on `concat(f, e)`, split MLP output.
    NoFs,
    /// Feature sampler, single-width MLP (logit and feature paths coincide).
    NoPad,
    /// Linear connector and single-width MLP.
    Neither,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Neither, Variant::NoFs, Variant::NoPad, Variant::Fspad];

    pub fn uses_sampler(self) -> bool {
        matches!(self, Variant::Fspad | Variant::NoPad)
    }

    pub fn split_mlp(self) -> bool {
        matches!(self, Variant::Fspad | Variant::NoFs)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fspad => "fspad",
            Variant::NoFs => "no_fs",
            Variant::NoPad => "no_pad",
            Variant::Neither => "neither",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fspad" => Variant::Fspad,
            "no_fs" => Variant::NoFs,
            "no_pad" => Variant::NoPad,
            "neither" => Variant::Neither,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?} (expected fspad, no_fs, no_pad or neither)"
                )))
            }
        })
    }
}
