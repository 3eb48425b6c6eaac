use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::verify::{commit, sample_index, target_probs, verify_greedy, verify_stochastic};
use crate::drafting::{DraftContext, Proposer, TokenTree, TreeConfig};
use crate::error::{Error, Result};
use crate::models::TargetModel;
use crate::tensor::{argmax, AttnMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub max_new: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    pub tree: TreeConfig,
    pub eos: Option<u32>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            max_new: 64,
            temperature: 0.0,
            seed: 0,
            tree: TreeConfig::default(),
            eos: None,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.temperature;
        if !(t == 0.0 || (t > 0.0 && t <= 2.0)) {
            return Err(Error::contract(format!("temperature {t} outside {{0}} or (0, 2]")));
        }
        self.tree.validate()
    }
}

/// One draft + verify round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Drafted nodes sent to the target (root excluded).
    pub tree_nodes: usize,
    pub accepted: usize,
    /// Tokens appended to the output this step (after max_new/EOS cut).
    pub emitted: usize,
    pub target_passes: usize,
    pub draft_passes: usize,
    pub draft_us: u64,
    pub verify_us: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Newly generated tokens (prompt excluded).
    pub tokens: Vec<u32>,
    pub steps: Vec<StepStats>,
    pub wall_us: u64,
}

impl Generation {
    pub fn target_passes(&self) -> usize {
        self.steps.iter().map(|s| s.target_passes).sum()
    }

    pub fn emitted(&self) -> usize {
        self.steps.iter().map(|s| s.emitted).sum()
    }

    pub fn draft_passes(&self) -> usize {
        self.steps.iter().map(|s| s.draft_passes).sum()
    }

    /// Average tokens emitted per target verification pass.
    pub fn tau(&self) -> f64 {
        let passes = self.target_passes();
        if passes == 0 {
            0.0
        } else {
            self.emitted() as f64 / passes as f64
        }
    }
}

/// Failure during generation, carrying whatever was produced before it.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct GenerateError {
    #[source]
    pub source: Error,
    pub partial: Generation,
}

impl From<GenerateError> for Error {
    fn from(e: GenerateError) -> Self {
        e.source
    }
}

fn fail(source: Error, partial: Generation, start: Instant) -> GenerateError {
    let mut partial = partial;
    partial.wall_us = start.elapsed().as_micros() as u64;
    GenerateError { source, partial }
}

/// Appends `new` to `out`, honouring `max_new` and `eos`. Returns the count
/// appended and whether generation is finished.
fn emit(out: &mut Vec<u32>, new: &[u32], max_new: usize, eos: Option<u32>) -> (usize, bool) {
    let mut n = 0;
    for &t in new {
        if out.len() >= max_new {
            return (n, true);
        }
        out.push(t);
        n += 1;
        if Some(t) == eos {
            return (n, true);
        }
    }
    (n, out.len() >= max_new)
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Speculative decoding: draft a tree, verify it with one target pass,
/// commit the accepted path plus a bonus token, repeat.
pub fn generate(
    target: &TargetModel,
    proposer: &mut dyn Proposer,
    prompt: &[u32],
    cfg: &GenerateConfig,
) -> std::result::Result<Generation, GenerateError> {
    let start = Instant::now();
    let mut gen = Generation::default();
    if prompt.is_empty() {
        return Err(fail(Error::contract("prompt must be nonempty"), gen, start));
    }
    if let Err(e) = cfg.validate() {
        return Err(fail(e, gen, start));
    }
    proposer.reset();
    let h = target.config.hidden_size;
    let max = target.config.max_seq_len;
    let mut cache = target.new_cache();
    let mut tokens = prompt.to_vec();
    let mut features: Vec<f32> = Vec::new();

    let p = prompt.len() - 1;
    if p > 0 {
        let positions: Vec<usize> = (0..p).collect();
        match target.infer(&prompt[..p], &positions, &AttnMask::Causal { offset: 0 }, Some(&mut cache)) {
            Ok((_, f)) => features = f.into_data(),
            Err(e) => return Err(fail(e, gen, start)),
        }
    }

    let mut step = 0;
    while gen.tokens.len() < cfg.max_new {
        let l = tokens.len() - 1;
        if l >= max {
            let e = Error::Capacity { needed: l + 1, max };
            return Err(fail(e, gen, start));
        }
        let room = max - 1 - l;
        let t0 = Instant::now();
        let (tree, draft_passes) = if room == 0 {
            (Ok(TokenTree::new(tokens[l])), 0)
        } else {
            let tc = TreeConfig {
                depth: cfg.tree.depth.min(room),
                budget: cfg.tree.budget.min(room),
                ..cfg.tree
            };
            let ctx = DraftContext {
                tokens: &tokens,
                features: &features,
                tree: tc,
            };
            let t = proposer.propose(&ctx);
            (t, proposer.last_passes())
        };
        let tree = match tree.and_then(|t| check_tree(t, tokens[l], cfg.tree.budget.min(room))) {
            Ok(t) => t,
            Err(e) => return Err(fail(e, gen, start)),
        };
        let draft_us = t0.elapsed().as_micros() as u64;

        let t1 = Instant::now();
        let verified = (|| {
            let flat = tree.flatten(l);
            let mask = tree.verification_mask(l)?;
            let (logits, feats) = target.infer(&flat.tokens, &flat.positions, &mask, Some(&mut cache))?;
            let result = if cfg.temperature == 0.0 {
                verify_greedy(&tree, &logits)?
            } else {
                let probs = target_probs(&logits, cfg.temperature)?;
                verify_stochastic(&tree, &probs, &mut step_rng(cfg.seed, step))?
            };
            commit(&mut cache, &tree, l, &result)?;
            features.extend_from_slice(feats.row(0));
            for &n in &result.accepted_path {
                features.extend_from_slice(feats.row(n));
            }
            Ok::<_, Error>(result)
        })();
        let result = match verified {
            Ok(r) => r,
            Err(e) => return Err(fail(e, gen, start)),
        };
        debug_assert_eq!(features.len(), (l + 1 + result.accepted_path.len()) * h);

        let mut new = result.accepted_tokens.clone();
        new.push(result.bonus_token);
        tokens.extend_from_slice(&new);
        let (n, done) = emit(&mut gen.tokens, &new, cfg.max_new, cfg.eos);
        gen.steps.push(StepStats {
            step,
            tree_nodes: tree.num_drafted(),
            accepted: result.accepted_tokens.len(),
            emitted: n,
            target_passes: result.target_forward_passes,
            draft_passes,
            draft_us,
            verify_us: t1.elapsed().as_micros() as u64,
        });
        step += 1;
        if done {
            break;
        }
    }
    gen.wall_us = start.elapsed().as_micros() as u64;
    Ok(gen)
}

fn check_tree(tree: TokenTree, root: u32, budget: usize) -> Result<TokenTree> {
    tree.validate()?;
    if tree.root_token() != root {
        return Err(Error::contract("proposed tree is not rooted at the last token"));
    }
    if tree.num_drafted() > budget {
        return Err(Error::contract(format!(
            "proposed tree has {} nodes, budget {budget}",
            tree.num_drafted()
        )));
    }
    Ok(tree)
}

/// Plain autoregressive decoding with the target alone, one pass per token.
/// Greedy when `temperature == 0`; sampling uses the same per-step streams.
pub fn vanilla_generate(
    target: &TargetModel,
    prompt: &[u32],
    max_new: usize,
    temperature: f64,
    seed: u64,
    eos: Option<u32>,
) -> std::result::Result<Generation, GenerateError> {
    let start = Instant::now();
    let mut gen = Generation::default();
    let cfg = GenerateConfig {
        max_new,
        temperature,
        seed,
        eos,
        ..GenerateConfig::default()
    };
    if prompt.is_empty() {
        return Err(fail(Error::contract("prompt must be nonempty"), gen, start));
    }
    if let Err(e) = cfg.validate() {
        return Err(fail(e, gen, start));
    }
    let max = target.config.max_seq_len;
    let mut cache = target.new_cache();
    let mut input = prompt.to_vec();
    let mut pos = 0;
    let mut step = 0;
    while gen.tokens.len() < max_new {
        let t0 = Instant::now();
        let positions: Vec<usize> = (pos..pos + input.len()).collect();
        if positions.last().is_some_and(|&p| p >= max) {
            let e = Error::Capacity { needed: pos + input.len(), max };
            return Err(fail(e, gen, start));
        }
        let next = (|| {
            let (logits, _) =
                target.infer(&input, &positions, &AttnMask::Causal { offset: pos }, Some(&mut cache))?;
            let last = logits.row(logits.rows() - 1);
            if temperature == 0.0 {
                Ok::<_, Error>(argmax(last) as u32)
            } else {
                let row = crate::tensor::Tensor::new([1, last.len()], last.to_vec())?;
                let probs = target_probs(&row, temperature)?;
                Ok(sample_index(probs.data(), &mut step_rng(seed, step))? as u32)
            }
        })();
        let next = match next {
            Ok(t) => t,
            Err(e) => return Err(fail(e, gen, start)),
        };
        pos += input.len();
        input = vec![next];
        let (n, done) = emit(&mut gen.tokens, &[next], max_new, eos);
        gen.steps.push(StepStats {
            step,
            tree_nodes: 0,
            accepted: 0,
            emitted: n,
            target_passes: 1,
            draft_passes: 0,
            draft_us: 0,
            verify_us: t0.elapsed().as_micros() as u64,
        });
        step += 1;
        if done {
            break;
        }
    }
    gen.wall_us = start.elapsed().as_micros() as u64;
    Ok(gen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drafting::ReferenceProposer;
    use crate::models::ModelConfig;

    fn micro() -> TargetModel {
        TargetModel::new(
            ModelConfig {
                vocab_size: 16,
                hidden_size: 8,
                intermediate_size: 12,
                n_layers: 2,
                n_heads: 2,
                max_seq_len: 32,
                rope_base: 10_000.0,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn emit_respects_limits() {
        let mut out = vec![1];
        assert_eq!(emit(&mut out, &[2, 3, 4], 3, None), (2, true));
        let mut out = vec![];
        assert_eq!(emit(&mut out, &[2, 9, 4], 10, Some(9)), (2, true));
        assert_eq!(out, vec![2, 9]);
    }

    #[test]
    fn single_token_request_uses_one_pass() {
        let m = micro();
        let mut prop = ReferenceProposer {
            reference: vec![],
            corrupt: false,
            vocab_size: 16,
        };
        let cfg = GenerateConfig {
            max_new: 1,
            ..GenerateConfig::default()
        };
        let g = generate(&m, &mut prop, &[1, 2, 3], &cfg).unwrap();
        assert_eq!(g.target_passes(), 1);
        assert_eq!(g.tokens.len(), 1);
        assert_eq!(g.tau(), 1.0);
    }

    #[test]
    fn oracle_chain_is_fully_accepted() {
        let m = micro();
        let prompt = [3u32, 1, 4];
        let reference = vanilla_generate(&m, &prompt, 20, 0.0, 0, None).unwrap();
        let mut full = prompt.to_vec();
        full.extend(&reference.tokens);
        let mut prop = ReferenceProposer {
            reference: full,
            corrupt: false,
            vocab_size: 16,
        };
        let cfg = GenerateConfig {
            max_new: 20,
            tree: TreeConfig {
                depth: 4,
                top_k: 1,
                select_m: 1,
                budget: 4,
            },
            ..GenerateConfig::default()
        };
        let g = generate(&m, &mut prop, &prompt, &cfg).unwrap();
        assert_eq!(g.tokens, reference.tokens);
        assert_eq!(g.target_passes(), 4);
        assert!(g.steps.iter().all(|s| s.accepted == 4 || s.emitted < 5));
    }

    #[test]
    fn wrong_drafts_still_match_vanilla() {
        let m = micro();
        let prompt = [7u32];
        let reference = vanilla_generate(&m, &prompt, 12, 0.0, 0, None).unwrap();
        let mut full = prompt.to_vec();
        full.extend(&reference.tokens);
        let mut prop = ReferenceProposer {
            reference: full,
            corrupt: true,
            vocab_size: 16,
        };
        let cfg = GenerateConfig {
            max_new: 12,
            ..GenerateConfig::default()
        };
        let g = generate(&m, &mut prop, &prompt, &cfg).unwrap();
        assert_eq!(g.tokens, reference.tokens);
        assert_eq!(g.tau(), 1.0);
    }

    #[test]
    fn context_overflow_returns_partial_output() {
        let m = micro();
        let prompt: Vec<u32> = (0..30).map(|i| i % 16).collect();
        let mut prop = ReferenceProposer {
            reference: vec![],
            corrupt: false,
            vocab_size: 16,
        };
        let cfg = GenerateConfig {
            max_new: 10,
            ..GenerateConfig::default()
        };
        let err = generate(&m, &mut prop, &prompt, &cfg).unwrap_err();
        assert!(matches!(err.source, Error::Capacity { .. }));
        assert_eq!(err.partial.tokens.len(), 3);
        let v = vanilla_generate(&m, &prompt, 10, 0.0, 0, None).unwrap_err();
        assert_eq!(v.partial.tokens, err.partial.tokens);
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let m = micro();
        assert!(vanilla_generate(&m, &[1], 4, 2.5, 0, None).is_err());
        assert!(vanilla_generate(&m, &[1], 4, -1.0, 0, None).is_err());
    }
}
