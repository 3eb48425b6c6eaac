use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layers::{normal_param, ones_param, DecoderLayer, KvCache, INIT_STD, NORM_EPS};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Param, Real, Tape, Tensor, Var};

/// Decoder-only target model.
#[derive(Clone, Debug)]
pub struct TargetModel<T: Real = f32> {
    pub config: ModelConfig,
    pub embed: Param<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub final_norm: Param<T>,
    pub head: Param<T>,
}

pub struct TargetOutput<'t, T: Real> {
    /// `[batch, seq, vocab]`
    pub logits: Var<'t, T>,
    /// `[batch, seq, hidden]`, the hidden state entering the final norm.
    pub features: Var<'t, T>,
}

impl<T: Real> TargetModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, h, i) = (config.vocab_size, config.hidden_size, config.intermediate_size);
        let embed = normal_param("embed", &[v, h], INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|l| DecoderLayer::init(&format!("layers.{l}"), h, i, h, &mut rng))
            .collect();
        Ok(Self {
            embed,
            layers,
            final_norm: ones_param("final_norm", h),
            head: normal_param("head", &[h, v], INIT_STD, &mut rng),
            config,
        })
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(
            self.config.n_layers,
            self.config.hidden_size,
            self.config.max_seq_len,
        )
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t >= self.config.vocab_size {
                    Err(Error::Index {
                        op: "embed",
                        index: t,
                        size: self.config.vocab_size,
                    })
                } else {
                    Ok(t)
                }
            })
            .collect()
    }

    /// Embedding rows for `tokens`, shaped `[tokens.len(), hidden]`.
    pub fn embed<'t>(&self, tape: &'t Tape<T>, tokens: &[u32]) -> Result<Var<'t, T>> {
        let ids = self.check_tokens(tokens)?;
        tape.param(&self.embed).embedding(&ids)
    }

    /// The shared LLM head: final RMSNorm followed by the output projection.
    pub fn head_logits<'t>(&self, tape: &'t Tape<T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
        features
            .rms_norm(tape.param(&self.final_norm), NORM_EPS)?
            .matmul(tape.param(&self.head))
    }

    /// Runs `batch` sequences of equal length. `positions` holds one rotary
    /// position per sequence index. With a cache (batch 1 only) the mask must
    /// cover `cache.len() + seq` keys and the cache grows by `seq` rows.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        tokens: &[u32],
        batch: usize,
        positions: &[usize],
        mask: &AttnMask,
        mut cache: Option<&mut KvCache<T>>,
    ) -> Result<TargetOutput<'t, T>> {
        let seq = positions.len();
        if batch == 0 || tokens.len() != batch * seq {
            return Err(Error::Shape {
                op: "target_forward",
                lhs: vec![tokens.len()],
                rhs: vec![batch, seq],
            });
        }
        let max = self.config.max_seq_len;
        if let Some(&p) = positions.iter().max() {
            if p >= max {
                return Err(Error::Capacity { needed: p + 1, max });
            }
        }
        if let Some(c) = cache.as_deref() {
            c.check_room(seq)?;
        }
        let h = self.config.hidden_size;
        let mut x = self.embed(tape, tokens)?.reshape([batch, seq, h])?;
        for (l, layer) in self.layers.iter().enumerate() {
            let kv = cache.as_deref_mut().map(|c| c.layer_mut(l));
            let out = layer.forward(
                tape,
                x,
                positions,
                mask,
                kv,
                self.config.n_heads,
                self.config.rope_base,
            )?;
            x = out.residual.add(out.mlp)?;
        }
        let logits = self.head_logits(tape, x)?;
        Ok(TargetOutput {
            logits,
            features: x,
        })
    }

    /// Single-sequence inference without gradient recording.
    /// Returns `([seq, vocab] logits, [seq, hidden] features)`.
    pub fn infer(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttnMask,
        cache: Option<&mut KvCache<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let tape = Tape::inference();
        let out = self.forward(&tape, tokens, 1, positions, mask, cache)?;
        let seq = positions.len();
        let logits = out.logits.value().reshape([seq, self.config.vocab_size])?;
        let features = out.features.value().reshape([seq, self.config.hidden_size])?;
        Ok((logits, features))
    }

    /// Causal forward over a whole sequence from position 0.
    pub fn infer_causal(&self, tokens: &[u32]) -> Result<(Tensor<T>, Tensor<T>)> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        self.infer(tokens, &positions, &AttnMask::Causal { offset: 0 }, None)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.embed];
        for l in &self.layers {
            v.extend(l.params());
        }
        v.push(&self.final_norm);
        v.push(&self.head);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.embed];
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.head);
        v
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.requires_grad = trainable;
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> TargetModel<U> {
        TargetModel {
            config: self.config.clone(),
            embed: self.embed.cast(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
        }
    }

    /// SHA-256 over parameter names and values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name().as_bytes());
            for v in p.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            hidden_size: 8,
            intermediate_size: 12,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn single_token_shapes_and_cache_growth() {
        let m = TargetModel::<f32>::new(micro(), 1).unwrap();
        let mut cache = m.new_cache();
        let (logits, feats) = m
            .infer(&[3], &[0], &AttnMask::Causal { offset: 0 }, Some(&mut cache))
            .unwrap();
        assert_eq!(logits.shape(), &[1, 16]);
        assert_eq!(feats.shape(), &[1, 8]);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let m = TargetModel::<f32>::new(micro(), 2).unwrap();
        let toks = [1u32, 5, 7, 2, 9, 11];
        let (full, _) = m.infer_causal(&toks).unwrap();
        let mut cache = m.new_cache();
        let mut last = None;
        for (i, &t) in toks.iter().enumerate() {
            let (l, _) = m
                .infer(&[t], &[i], &AttnMask::Causal { offset: i }, Some(&mut cache))
                .unwrap();
            last = Some(l);
        }
        let last = last.unwrap();
        for (a, b) in last.data().iter().zip(full.row(toks.len() - 1)) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn position_overflow_is_a_capacity_error() {
        let m = TargetModel::<f32>::new(micro(), 3).unwrap();
        let err = m.infer(&[1], &[32], &AttnMask::Causal { offset: 0 }, None);
        assert!(matches!(err, Err(Error::Capacity { .. })));
        let mut cache = m.new_cache();
        let toks: Vec<u32> = vec![1; 32];
        let pos: Vec<usize> = (0..32).collect();
        m.infer(&toks, &pos, &AttnMask::Causal { offset: 0 }, Some(&mut cache))
            .unwrap();
        let err = m.infer(&[1], &[0], &AttnMask::Causal { offset: 32 }, Some(&mut cache));
        assert!(matches!(err, Err(Error::Capacity { .. })));
    }

    #[test]
    fn out_of_vocab_token_is_index_error() {
        let m = TargetModel::<f32>::new(micro(), 3).unwrap();
        assert!(matches!(m.infer_causal(&[16]), Err(Error::Index { .. })));
    }

    #[test]
    fn embed_returns_table_rows_in_order() {
        let m = TargetModel::<f32>::new(micro(), 4).unwrap();
        let tape = Tape::inference();
        let e = m.embed(&tape, &[0, 3, 0]).unwrap().value();
        assert_eq!(e.row(0), m.embed.value.row(0));
        assert_eq!(e.row(1), m.embed.value.row(3));
        assert_eq!(e.row(2), m.embed.value.row(0));
    }
}
