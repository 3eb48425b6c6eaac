//! Synthetic corpus, tokenizer, target pretraining and draft distillation.

mod corpus;
mod distill;
mod pretrain;
mod tokenizer;

pub use corpus::{
    generate_document, pack_windows, Corpus, CorpusConfig, Document, EncodedDoc, TaskKind, TokenizedCorpus,
    Window,
};
pub use distill::{
    composite_loss, draft_batch_loss, eval_agreement, eval_draft_accuracy, shift_mask, shift_pairs, train_draft,
    Agreement, DraftLoss, DraftRecord, DraftTrainOutput, TeacherPool,
};
pub use pretrain::{
    eval_target_loss, extract_teacher_trace, pretrain_target, PretrainOutput, TargetRecord,
};
pub use tokenizer::{Tokenizer, BOS, EOS};

use std::io::Write;

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{clip_grad_norm, AdamW, Gradients, Param};

/// Optimiser and schedule settings shared by target pretraining and draft
/// training. `w` only affects the draft loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Weight of the token-level loss in `w * L_t + L_f`.
    pub w: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub seed: u64,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Windows used for each evaluation.
    pub eval_windows: usize,
    /// Cap on cached teacher windows for draft training.
    pub max_teacher_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            adam_betas: [0.9, 0.95],
            weight_decay: 0.0,
            grad_clip: 0.5,
            w: 0.1,
            batch_size: 16,
            seq_len: 128,
            steps: 3000,
            seed: 0,
            eval_every: 0,
            eval_windows: 64,
            max_teacher_windows: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.w >= 0.0) {
            return bad("w must be nonnegative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.seq_len < 3 {
            return bad("batch_size must be positive and seq_len at least 3");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(
            self.learning_rate,
            (self.adam_betas[0], self.adam_betas[1]),
            self.weight_decay,
        )
    }
}

fn apply_update(mut params: Vec<&mut Param>, grads: &Gradients, opt: &mut AdamW, clip: f64) -> f64 {
    grads.accumulate(params.iter_mut().map(|p| &mut **p));
    let norm = clip_grad_norm(params.iter_mut().map(|p| &mut **p), clip);
    opt.step(params.iter_mut().map(|p| &mut **p));
    for p in params.iter_mut() {
        p.zero_grad();
    }
    norm
}

fn sample_batch<'a, T>(pool: &'a [T], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    (0..n).map(|_| pool.choose(rng).expect("nonempty pool")).collect()
}

fn write_record<S: Serialize>(log: &mut Option<&mut dyn Write>, rec: &S) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(rec)?;
        writeln!(w, "{line}").map_err(|e| Error::Format(format!("log write failed: {e}")))?;
    }
    Ok(())
}
