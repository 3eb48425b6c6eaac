use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Window;
use super::{apply_update, sample_batch, write_record, TrainConfig};
use crate::error::{Error, Result};
use crate::models::{DraftStack, TargetModel, Variant};
use crate::tensor::{argmax, AttnMask, Real, Tape, Tensor, Var};

/// Loss mask over draft positions `0..T-1`. Draft position `p` reads the
/// teacher feature at `p` with token `p + 1` and is supervised by the teacher
/// at `p + 1`, whose prediction is token `p + 2`; the pair counts only when
/// that token lies in the response region.
pub fn shift_mask(response_mask: &[bool]) -> Vec<bool> {
    let t = response_mask.len();
    (0..t.saturating_sub(1))
        .map(|p| p + 2 < t && response_mask[p + 2])
        .collect()
}

/// `(draft position, teacher position)` pairs that enter the loss.
pub fn shift_pairs(response_mask: &[bool]) -> Vec<(usize, usize)> {
    shift_mask(response_mask)
        .into_iter()
        .enumerate()
        .filter(|&(_, m)| m)
        .map(|(p, _)| (p, p + 1))
        .collect()
}

pub struct DraftLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub l_t: Var<'t, T>,
    pub l_f: Var<'t, T>,
    pub top1_correct: usize,
    pub counted: usize,
}

/// `w * CE(logits, teacher_probs) + SmoothL1(f, teacher_feats)` over the
/// masked rows. Rows are flattened: `logits [n, V]`, `f [n, h]`.
pub fn composite_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    logits: Var<'t, T>,
    f: Var<'t, T>,
    teacher_probs: &Tensor<T>,
    teacher_feats: &Tensor<T>,
    mask: &[bool],
    w: f64,
) -> Result<DraftLoss<'t, T>> {
    let l_t = logits.cross_entropy(teacher_probs, mask)?;
    let l_f = f.smooth_l1(tape.constant(teacher_feats.clone()), mask)?;
    let total = l_t.scale(w).add(l_f)?;
    let lv = logits.value();
    let mut top1_correct = 0;
    let mut counted = 0;
    for (r, &m) in mask.iter().enumerate() {
        if m {
            counted += 1;
            if argmax(lv.row(r)) == argmax(teacher_probs.row(r)) {
                top1_correct += 1;
            }
        }
    }
    Ok(DraftLoss {
        total,
        l_t,
        l_f,
        top1_correct,
        counted,
    })
}

struct ShiftedBatch<T: Real> {
    inputs: Tensor<T>,
    next_tokens: Vec<u32>,
    teacher_feats: Tensor<T>,
    mask: Vec<bool>,
}

fn shifted_batch<T: Real>(windows: &[&Window], feats: &[&Tensor<T>]) -> Result<ShiftedBatch<T>> {
    let t = windows[0].tokens.len();
    let h = feats[0].last_dim();
    let n = t - 1;
    let mut inputs = Vec::with_capacity(windows.len() * n * h);
    let mut teacher = Vec::with_capacity(windows.len() * n * h);
    let mut next_tokens = Vec::with_capacity(windows.len() * n);
    let mut mask = Vec::with_capacity(windows.len() * n);
    for (w, f) in windows.iter().zip(feats) {
        if w.tokens.len() != t || f.shape() != [t, h] {
            return Err(Error::Shape {
                op: "draft_batch",
                lhs: f.shape().to_vec(),
                rhs: vec![t, h],
            });
        }
        inputs.extend_from_slice(&f.data()[..n * h]);
        teacher.extend_from_slice(&f.data()[h..]);
        next_tokens.extend_from_slice(&w.tokens[1..]);
        mask.extend(shift_mask(&w.response_mask));
    }
    Ok(ShiftedBatch {
        inputs: Tensor::new([windows.len(), n, h], inputs)?,
        next_tokens,
        teacher_feats: Tensor::new([windows.len() * n, h], teacher)?,
        mask,
    })
}

/// Teacher-forced draft loss for a batch of windows with precomputed
/// teacher features `[T, hidden]`.
pub fn draft_batch_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    target: &TargetModel<T>,
    stack: &DraftStack<T>,
    windows: &[&Window],
    feats: &[&Tensor<T>],
    w: f64,
) -> Result<DraftLoss<'t, T>> {
    if windows.is_empty() || windows.len() != feats.len() {
        return Err(Error::contract("draft batch needs one feature tensor per window"));
    }
    let b = shifted_batch(windows, feats)?;
    let n = b.next_tokens.len() / windows.len();
    let (h, v) = (target.config.hidden_size, target.config.vocab_size);
    let teacher_probs = {
        let t2 = Tape::inference();
        let z = target.head_logits(&t2, t2.constant(b.teacher_feats.clone()))?;
        z.value().softmax_last()?
    };
    let positions: Vec<usize> = (0..n).collect();
    let out = stack.step(
        tape,
        target,
        tape.constant(b.inputs),
        &b.next_tokens,
        &positions,
        &AttnMask::Causal { offset: 0 },
        None,
    )?;
    let rows = windows.len() * n;
    composite_loss(
        tape,
        out.logits.reshape([rows, v])?,
        out.f.reshape([rows, h])?,
        &teacher_probs,
        &b.teacher_feats,
        &b.mask,
        w,
    )
}

/// Target features for a fixed set of training windows, computed once and
/// shared by every draft variant.
#[derive(Clone, Debug)]
pub struct TeacherPool {
    pub windows: Vec<Window>,
    pub features: Vec<Tensor>,
}

impl TeacherPool {
    pub fn build(target: &TargetModel, windows: &[Window], limit: usize) -> Result<Self> {
        let windows: Vec<Window> = windows.iter().take(limit).cloned().collect();
        if windows.is_empty() {
            return Err(Error::contract("teacher pool is empty"));
        }
        let mut features = Vec::with_capacity(windows.len());
        for w in &windows {
            features.push(target.infer_causal(&w.tokens)?.1);
        }
        Ok(Self { windows, features })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftRecord {
    pub step: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    #[serde(rename = "L_f")]
    pub l_f: f64,
    pub top1_acc: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct DraftTrainOutput {
    pub stack: DraftStack,
    pub log: Vec<DraftRecord>,
    pub warnings: Vec<String>,
}

/// Trains a fresh draft stack of the given variant against a frozen target.
pub fn train_draft(
    target: &TargetModel,
    pool: &TeacherPool,
    variant: Variant,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<DraftTrainOutput> {
    cfg.validate()?;
    let mut frozen = target.clone();
    frozen.set_trainable(false);
    let mut stack = DraftStack::new(target.config.clone(), variant, cfg.seed)?;
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let idx: Vec<usize> = (0..pool.len()).collect();
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut warnings = Vec::new();
    for step in 0..cfg.steps {
        let pick = sample_batch(&idx, cfg.batch_size, &mut rng);
        let windows: Vec<&Window> = pick.iter().map(|&&i| &pool.windows[i]).collect();
        let feats: Vec<&Tensor> = pick.iter().map(|&&i| &pool.features[i]).collect();
        let tape = Tape::new();
        let loss = draft_batch_loss(&tape, &frozen, &stack, &windows, &feats, cfg.w).map_err(|e| match e {
            Error::Numeric { op } => Error::Training {
                step,
                what: format!("non-finite values in {op}"),
            },
            other => other,
        })?;
        let (l, lt, lf) = (
            loss.total.item() as f64,
            loss.l_t.item() as f64,
            loss.l_f.item() as f64,
        );
        if !(l.is_finite() && lt.is_finite() && lf.is_finite()) {
            return Err(Error::Training {
                step,
                what: format!("loss is {l}"),
            });
        }
        let top1_acc = if loss.counted == 0 {
            0.0
        } else {
            loss.top1_correct as f64 / loss.counted as f64
        };
        let grads = tape.backward(loss.total)?;
        warnings.extend(tape.warnings());
        drop(tape);
        let norm = apply_update(stack.params_mut(), &grads, &mut opt, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Training {
                step,
                what: "gradient norm is not finite".into(),
            });
        }
        let rec = DraftRecord {
            step,
            loss: l,
            l_t: lt,
            l_f: lf,
            top1_acc,
            lr: cfg.learning_rate,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        write_record(&mut log, &rec)?;
        log::debug!("draft {variant} step {step} L {l:.4} L_t {lt:.4} L_f {lf:.4} acc {top1_acc:.3}");
        records.push(rec);
    }
    Ok(DraftTrainOutput {
        stack,
        log: records,
        warnings,
    })
}

/// Teacher-forced next-token agreement between draft and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub positions: usize,
}

/// Agreement of arbitrary per-window draft logits (`[T-1, V]`, indexed by
/// draft position) with the target's argmax at the next position.
pub fn eval_agreement<F>(target: &TargetModel, windows: &[Window], k: usize, mut draft_logits: F) -> Result<Agreement>
where
    F: FnMut(&Window, &Tensor) -> Result<Tensor>,
{
    if windows.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let (mut hit1, mut hitk, mut n) = (0usize, 0usize, 0usize);
    for w in windows {
        let (logits, feats) = target.infer_causal(&w.tokens)?;
        let d = draft_logits(w, &feats)?;
        for (p, q) in shift_pairs(&w.response_mask) {
            let want = argmax(logits.row(q));
            let row = d.row(p);
            let mine = argmax(row);
            n += 1;
            if mine == want {
                hit1 += 1;
            }
            let better = row.iter().filter(|&&x| x > row[want]).count();
            let ties_before = row[..want].iter().filter(|&&x| x == row[want]).count();
            if better + ties_before < k {
                hitk += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::contract("evaluation split has no response positions"));
    }
    Ok(Agreement {
        top1: hit1 as f64 / n as f64,
        topk: hitk as f64 / n as f64,
        k,
        positions: n,
    })
}

/// Teacher-forced top-1 / top-k agreement of a trained draft stack.
pub fn eval_draft_accuracy(
    target: &TargetModel,
    stack: &DraftStack,
    windows: &[Window],
    k: usize,
) -> Result<Agreement> {
    eval_agreement(target, windows, k, |w, feats| {
        let t = w.tokens.len();
        let h = target.config.hidden_size;
        let tape = Tape::inference();
        let inputs = Tensor::new([1, t - 1, h], feats.data()[..(t - 1) * h].to_vec())?;
        let positions: Vec<usize> = (0..t - 1).collect();
        let out = stack.step(
            &tape,
            target,
            tape.constant(inputs),
            &w.tokens[1..],
            &positions,
            &AttnMask::Causal { offset: 0 },
            None,
        )?;
        out.logits.value().reshape([t - 1, target.config.vocab_size])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_pairs_match_hand_enumeration() {
        // Tokens 0..5, response starts at index 2.
        let mask = [false, false, true, true, true];
        assert_eq!(shift_pairs(&mask), vec![(0, 1), (1, 2), (2, 3)]);
        let mask = [false, false, false, true, false];
        assert_eq!(shift_pairs(&mask), vec![(1, 2)]);
    }

    #[test]
    fn all_prompt_window_contributes_nothing() {
        assert!(shift_pairs(&[false; 6]).is_empty());
    }

    #[test]
    fn composite_loss_decomposes() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_f64([2, 3], &[0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap());
        let f = tape.leaf(Tensor::from_f64([2, 2], &[0.5, -1.0, 2.0, 0.0]).unwrap());
        let probs = Tensor::from_f64([2, 3], &[0.2, 0.5, 0.3, 0.6, 0.3, 0.1]).unwrap();
        let feats = Tensor::from_f64([2, 2], &[0.0, -1.0, 0.5, 0.5]).unwrap();
        for w in [0.0, 0.1, 1.0] {
            let l = composite_loss(&tape, logits, f, &probs, &feats, &[true, true], w).unwrap();
            let want = w * l.l_t.item() + l.l_f.item();
            assert!((l.total.item() - want).abs() < 1e-12);
            if w == 0.0 {
                assert_eq!(l.total.item(), l.l_f.item());
            }
        }
    }

    #[test]
    fn perfect_alignment_leaves_teacher_entropy() {
        let tape = Tape::<f64>::new();
        let z = Tensor::from_f64([1, 3], &[0.3, -0.4, 1.2]).unwrap();
        let probs = z.softmax_last().unwrap();
        let feats = Tensor::from_f64([1, 2], &[0.7, -0.1]).unwrap();
        let l = composite_loss(
            &tape,
            tape.constant(z),
            tape.constant(feats.clone()),
            &probs,
            &feats,
            &[true],
            0.1,
        )
        .unwrap();
        let entropy: f64 = -probs.data().iter().map(|p| p * p.ln()).sum::<f64>();
        assert_eq!(l.l_f.item(), 0.0);
        assert!((l.l_t.item() - entropy).abs() < 1e-12);
    }
}
