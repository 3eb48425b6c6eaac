use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{normal_param, zeros_param, DecoderLayer, KvCache, INIT_STD};
use super::target::TargetModel;
use super::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Param, Real, Tape, Var};

/// Gated connector: `eta = f + down(silu(gate(e)) * up(f))`.
///
/// Up and gate lift `f` and `e` to the intermediate width; the SiLU-activated
/// embedding acts as an elementwise selector on the lifted feature before the
/// down projection returns to `hidden_size`.
#[derive(Clone, Debug)]
pub struct FeatureSampler<T: Real = f32> {
    pub up: Param<T>,
    pub gate: Param<T>,
    pub down: Param<T>,
}

impl<T: Real> FeatureSampler<T> {
    pub fn init(hidden: usize, inter: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: normal_param("connector.up", &[hidden, inter], INIT_STD, rng),
            gate: normal_param("connector.gate", &[hidden, inter], INIT_STD, rng),
            down: normal_param("connector.down", &[inter, hidden], INIT_STD, rng),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        f: Var<'t, T>,
        e: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (fs, es) = (f.shape(), e.shape());
        if fs != es {
            return Err(Error::Shape {
                op: "feature_sampler",
                lhs: fs,
                rhs: es,
            });
        }
        let gate = e.matmul(tape.param(&self.gate))?.silu();
        let lifted = f.matmul(tape.param(&self.up))?;
        let sampled = gate.mul(lifted)?.matmul(tape.param(&self.down))?;
        f.add(sampled)
    }
}

/// Affine map of `concat(f, e)` to `hidden_size`.
#[derive(Clone, Debug)]
pub struct LinearConnector<T: Real = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> LinearConnector<T> {
    pub fn init(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: normal_param("connector.fc", &[2 * hidden, hidden], INIT_STD, rng),
            bias: zeros_param("connector.fc_bias", &[hidden]),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        f: Var<'t, T>,
        e: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (fs, es) = (f.shape(), e.shape());
        if fs != es {
            return Err(Error::Shape {
                op: "linear_connector",
                lhs: fs,
                rhs: es,
            });
        }
        let last = fs.len() - 1;
        Var::concat(&[f, e], last)?
            .matmul(tape.param(&self.weight))?
            .add_row(tape.param(&self.bias))
    }
}

#[derive(Clone, Debug)]
pub enum Connector<T: Real = f32> {
    Sampler(FeatureSampler<T>),
    Linear(LinearConnector<T>),
}

impl<T: Real> Connector<T> {
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        f: Var<'t, T>,
        e: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self {
            Connector::Sampler(s) => s.forward(tape, f, e),
            Connector::Linear(l) => l.forward(tape, f, e),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Connector::Sampler(s) => vec![&s.up, &s.gate, &s.down],
            Connector::Linear(l) => vec![&l.weight, &l.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Connector::Sampler(s) => vec![&mut s.up, &mut s.gate, &mut s.down],
            Connector::Linear(l) => vec![&mut l.weight, &mut l.bias],
        }
    }

    fn cast<U: Real>(&self) -> Connector<U> {
        match self {
            Connector::Sampler(s) => Connector::Sampler(FeatureSampler {
                up: s.up.cast(),
                gate: s.gate.cast(),
                down: s.down.cast(),
            }),
            Connector::Linear(l) => Connector::Linear(LinearConnector {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
        }
    }
}

/// One decoder layer. With `split`, the MLP emits `2 * hidden` columns:
/// the first half feeds the logit path, the second half the feature path,
/// and both are added to the same post-attention residual.
#[derive(Clone, Debug)]
pub struct DraftModel<T: Real = f32> {
    pub layer: DecoderLayer<T>,
    pub split: bool,
}

pub struct DraftStep<'t, T: Real> {
    /// Logit-path feature.
    pub f_tilde: Var<'t, T>,
    /// Feature carried into the next draft step.
    pub f: Var<'t, T>,
    /// `LLMhead(f_tilde)` through the target's norm and head.
    pub logits: Var<'t, T>,
}

impl<T: Real> DraftModel<T> {
    pub fn init(hidden: usize, inter: usize, split: bool, rng: &mut ChaCha8Rng) -> Self {
        let out = if split { 2 * hidden } else { hidden };
        Self {
            layer: DecoderLayer::init("draft", hidden, inter, out, rng),
            split,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        target: &TargetModel<T>,
        eta: Var<'t, T>,
        positions: &[usize],
        mask: &AttnMask,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<DraftStep<'t, T>> {
        let shape = eta.shape();
        if shape.len() != 3 || shape[2] != target.config.hidden_size {
            return Err(Error::Shape {
                op: "draft_forward",
                lhs: shape,
                rhs: vec![target.config.hidden_size],
            });
        }
        if let Some(c) = cache.as_deref() {
            if c.n_layers() != 1 {
                return Err(Error::contract("draft cache must have exactly one layer"));
            }
            c.check_room(shape[1])?;
        }
        let out = self.layer.forward(
            tape,
            eta,
            positions,
            mask,
            cache.map(|c| c.layer_mut(0)),
            target.config.n_heads,
            target.config.rope_base,
        )?;
        let (f_tilde, f) = if self.split {
            let h = target.config.hidden_size;
            let halves = out.mlp.split(2, &[h, h])?;
            (out.residual.add(halves[0])?, out.residual.add(halves[1])?)
        } else {
            let f = out.residual.add(out.mlp)?;
            (f, f)
        };
        let logits = target.head_logits(tape, f_tilde)?;
        Ok(DraftStep { f_tilde, f, logits })
    }
}

/// Connector plus draft layer. The embedding table, final norm and LLM head
/// are borrowed from the target on every call, never copied.
#[derive(Clone, Debug)]
pub struct DraftStack<T: Real = f32> {
    pub variant: Variant,
    pub config: ModelConfig,
    pub connector: Connector<T>,
    pub draft: DraftModel<T>,
}

impl<T: Real> DraftStack<T> {
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, i) = (config.hidden_size, config.intermediate_size);
        let connector = if variant.uses_sampler() {
            Connector::Sampler(FeatureSampler::init(h, i, &mut rng))
        } else {
            Connector::Linear(LinearConnector::init(h, &mut rng))
        };
        let draft = DraftModel::init(h, i, variant.split_mlp(), &mut rng);
        Ok(Self {
            variant,
            config,
            connector,
            draft,
        })
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(1, self.config.hidden_size, self.config.max_seq_len)
    }

    /// Draft inputs from features `[b, s, h]` and the tokens one step ahead.
    pub fn connect<'t>(
        &self,
        tape: &'t Tape<T>,
        target: &TargetModel<T>,
        features: Var<'t, T>,
        next_tokens: &[u32],
    ) -> Result<Var<'t, T>> {
        let shape = features.shape();
        let e = target.embed(tape, next_tokens)?.reshape(shape)?;
        self.connector.forward(tape, features, e)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step<'t>(
        &self,
        tape: &'t Tape<T>,
        target: &TargetModel<T>,
        features: Var<'t, T>,
        next_tokens: &[u32],
        positions: &[usize],
        mask: &AttnMask,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<DraftStep<'t, T>> {
        let eta = self.connect(tape, target, features, next_tokens)?;
        self.draft.forward(tape, target, eta, positions, mask, cache)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.connector.params();
        v.extend(self.draft.layer.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.connector.params_mut();
        v.extend(self.draft.layer.params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> DraftStack<U> {
        DraftStack {
            variant: self.variant,
            config: self.config.clone(),
            connector: self.connector.cast(),
            draft: DraftModel {
                layer: self.draft.layer.cast(),
                split: self.draft.split,
            },
        }
    }
}
