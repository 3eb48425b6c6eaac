use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{pack_windows, TokenizedCorpus, Window};
use super::{apply_update, sample_batch, write_record, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, TargetModel};
use crate::tensor::{AttnMask, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub model: TargetModel,
    pub log: Vec<TargetRecord>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

fn next_token_batch(batch: &[&Window]) -> (Vec<u32>, Vec<usize>, Vec<bool>) {
    let t = batch[0].tokens.len();
    let mut tokens = Vec::with_capacity(batch.len() * t);
    let mut labels = Vec::with_capacity(batch.len() * t);
    let mut mask = Vec::with_capacity(batch.len() * t);
    for w in batch {
        tokens.extend(&w.tokens);
        for i in 0..t {
            labels.push(w.tokens.get(i + 1).copied().unwrap_or(0) as usize);
            mask.push(i + 1 < t);
        }
    }
    (tokens, labels, mask)
}

/// Mean next-token cross entropy over every position of `windows`.
pub fn eval_target_loss(model: &TargetModel, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::contract("no evaluation windows"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(8) {
        let refs: Vec<&Window> = chunk.iter().collect();
        let (tokens, labels, mask) = next_token_batch(&refs);
        let t = chunk[0].tokens.len();
        let positions: Vec<usize> = (0..t).collect();
        let tape = Tape::inference();
        let out = model.forward(&tape, &tokens, chunk.len(), &positions, &AttnMask::Causal { offset: 0 }, None)?;
        let logits = out.logits.reshape([chunk.len() * t, model.config.vocab_size])?;
        let n = mask.iter().filter(|&&m| m).count();
        total += logits.cross_entropy_labels(&labels, &mask)?.item() as f64 * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Next-token pretraining of a fresh target on the corpus' training split.
pub fn pretrain_target(
    model_cfg: &ModelConfig,
    corpus: &TokenizedCorpus,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    if corpus.tokenizer.vocab_size() > model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} ids but the model vocabulary is {}",
            corpus.tokenizer.vocab_size(),
            model_cfg.vocab_size
        )));
    }
    if cfg.seq_len > model_cfg.max_seq_len {
        return Err(Error::Config("seq_len exceeds max_seq_len".into()));
    }
    let train = pack_windows(&corpus.train, cfg.seq_len);
    let mut eval = pack_windows(&corpus.eval, cfg.seq_len);
    eval.truncate(cfg.eval_windows.max(1));
    if train.is_empty() || eval.is_empty() {
        return Err(Error::contract("corpus too small for one training and one eval window"));
    }
    let mut model = TargetModel::new(model_cfg.clone(), cfg.seed)?;
    let initial_eval_loss = eval_target_loss(&model, &eval)?;
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    let t = cfg.seq_len;
    let positions: Vec<usize> = (0..t).collect();
    for step in 0..cfg.steps {
        let batch = sample_batch(&train, cfg.batch_size, &mut rng);
        let (tokens, labels, mask) = next_token_batch(&batch);
        let tape = Tape::new();
        let diverged = |e: Error| match e {
            Error::Numeric { op } => Error::Training {
                step,
                what: format!("non-finite values in {op}"),
            },
            other => other,
        };
        let out = model
            .forward(&tape, &tokens, batch.len(), &positions, &AttnMask::Causal { offset: 0 }, None)
            .map_err(diverged)?;
        let logits = out.logits.reshape([batch.len() * t, model_cfg.vocab_size])?;
        let loss = logits.cross_entropy_labels(&labels, &mask).map_err(diverged)?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                what: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let grad_norm = apply_update(model.params_mut(), &grads, &mut opt, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Training {
                step,
                what: "gradient norm is not finite".into(),
            });
        }
        let last = step + 1 == cfg.steps;
        let eval_loss = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            Some(eval_target_loss(&model, &eval)?)
        } else {
            None
        };
        let rec = TargetRecord {
            step,
            loss: value,
            eval_loss,
            grad_norm,
            lr: cfg.learning_rate,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        write_record(&mut log, &rec)?;
        log::debug!("target step {step} loss {value:.4}");
        records.push(rec);
    }
    let final_eval_loss = match records.last().and_then(|r| r.eval_loss) {
        Some(l) => l,
        None => eval_target_loss(&model, &eval)?,
    };
    Ok(PretrainOutput {
        model,
        log: records,
        initial_eval_loss,
        final_eval_loss,
    })
}

/// Teacher features and logits for one sequence, `([T, hidden], [T, vocab])`.
/// Runs on an inference tape, so nothing can flow back into the target.
pub fn extract_teacher_trace(target: &TargetModel, tokens: &[u32]) -> Result<(Tensor, Tensor)> {
    let (logits, features) = target.infer_causal(tokens)?;
    Ok((features, logits))
}
