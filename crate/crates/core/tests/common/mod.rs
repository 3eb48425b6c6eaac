#![allow(dead_code)]

use std::cmp::Ordering;

use fspad::models::{DraftStack, ModelConfig, TargetModel, Variant};
use fspad::tensor::{AttnMask, Tape, Tensor};

pub fn micro_config(vocab: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden_size: 8,
        intermediate_size: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len,
        rope_base: 10_000.0,
    }
}

/// Random target plus a draft whose weights are scaled up so its
/// distributions are far from uniform.
pub fn random_pair(vocab: usize, seed: u64, variant: Variant) -> (TargetModel, DraftStack) {
    let cfg = micro_config(vocab, 64);
    let mut target = TargetModel::new(cfg.clone(), seed).unwrap();
    for p in target.params_mut() {
        if p.shape().len() == 2 {
            p.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
    }
    let mut stack = DraftStack::new(cfg, variant, seed ^ 0xdead).unwrap();
    for p in stack.params_mut() {
        if p.shape().len() == 2 {
            p.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        }
    }
    (target, stack)
}

/// Draft distribution and feature after consuming `path` beyond the root,
/// computed by plain causal decoding one row at a time.
pub fn path_oracle(
    target: &TargetModel,
    stack: &DraftStack,
    tokens: &[u32],
    path: &[u32],
) -> (Vec<f32>, Vec<f32>) {
    let l = tokens.len() - 1;
    let h = target.config.hidden_size;
    let (_, feats) = target.infer_causal(&tokens[..l]).unwrap();
    let mut cache = stack.new_cache();
    let run = |cache: &mut fspad::models::KvCache, f: Vec<f32>, toks: &[u32], start: usize| {
        let tape = Tape::inference();
        let n = toks.len();
        let fv = tape.constant(Tensor::new([1, n, h], f).unwrap());
        let pos: Vec<usize> = (start..start + n).collect();
        let out = stack
            .step(&tape, target, fv, toks, &pos, &AttnMask::Causal { offset: start }, Some(cache))
            .unwrap();
        let probs = out
            .logits
            .value()
            .reshape([n, target.config.vocab_size])
            .unwrap()
            .softmax_last()
            .unwrap();
        let f = out.f.value().reshape([n, h]).unwrap();
        (probs.row(n - 1).to_vec(), f.row(n - 1).to_vec())
    };
    let (mut probs, mut f) = run(&mut cache, feats.data().to_vec(), &tokens[1..], 0);
    for (i, &t) in path.iter().enumerate() {
        let (p, nf) = run(&mut cache, f, &[t], l + i);
        probs = p;
        f = nf;
    }
    (probs, f)
}

#[derive(Clone, Debug)]
pub struct Cand {
    pub path: Vec<u32>,
    pub parent: Option<usize>,
    pub joint: f64,
}

fn cand_order(a: &Cand, b: &Cand) -> Ordering {
    b.joint
        .partial_cmp(&a.joint)
        .unwrap()
        .then(a.path.len().cmp(&b.path.len()))
        .then(a.path.last().cmp(&b.path.last()))
}

fn top_k(probs: &[f32], k: usize) -> Vec<(u32, f64)> {
    let mut v: Vec<(u32, f32)> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (i as u32, p))
        .collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    v.truncate(k);
    v.into_iter().map(|(t, p)| (t, p as f64)).collect()
}

/// Every candidate node the beam expansion generates, found by decoding each
/// expanded path independently.
pub fn oracle_candidates(
    target: &TargetModel,
    stack: &DraftStack,
    tokens: &[u32],
    depth: usize,
    k: usize,
    m: usize,
) -> Vec<Cand> {
    let mut cands: Vec<Cand> = Vec::new();
    let (root_probs, _) = path_oracle(target, stack, tokens, &[]);
    let mut frontier = Vec::new();
    for (t, p) in top_k(&root_probs, k) {
        cands.push(Cand {
            path: vec![t],
            parent: None,
            joint: p,
        });
        frontier.push(cands.len() - 1);
    }
    for _ in 1..depth {
        frontier.sort_by(|&a, &b| cand_order(&cands[a], &cands[b]).then(a.cmp(&b)));
        frontier.truncate(m);
        let mut next = Vec::new();
        for &c in &frontier {
            let (probs, _) = path_oracle(target, stack, tokens, &cands[c].path);
            for (t, p) in top_k(&probs, k) {
                let mut path = cands[c].path.clone();
                path.push(t);
                let joint = cands[c].joint * p;
                cands.push(Cand {
                    path,
                    parent: Some(c),
                    joint,
                });
                next.push(cands.len() - 1);
            }
        }
        frontier = next;
    }
    cands
}

/// Exhaustive search over ancestor-closed subsets of size at most `n`,
/// maximising the summed joint probability. Equal sums are resolved in favour
/// of the subset whose members, listed in rank order, rank higher first.
pub fn best_closed_subset(cands: &[Cand], n: usize) -> Vec<usize> {
    fn rec(
        i: usize,
        cands: &[Cand],
        n: usize,
        chosen: &mut Vec<usize>,
        inset: &mut Vec<bool>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if i == cands.len() {
            let sum: f64 = chosen.iter().map(|&c| cands[c].joint).sum();
            let better = match best {
                None => true,
                Some((s, b)) => {
                    sum > *s || (sum == *s && rank_lex(cands, chosen, b) == Ordering::Less)
                }
            };
            if better {
                *best = Some((sum, chosen.clone()));
            }
            return;
        }
        rec(i + 1, cands, n, chosen, inset, best);
        let parent_ok = cands[i].parent.is_none_or(|p| inset[p]);
        if parent_ok && chosen.len() < n {
            chosen.push(i);
            inset[i] = true;
            rec(i + 1, cands, n, chosen, inset, best);
            inset[i] = false;
            chosen.pop();
        }
    }
    fn rank_lex(cands: &[Cand], a: &[usize], b: &[usize]) -> Ordering {
        let sorted = |s: &[usize]| {
            let mut v = s.to_vec();
            v.sort_by(|&x, &y| cand_order(&cands[x], &cands[y]).then(x.cmp(&y)));
            v
        };
        let (a, b) = (sorted(a), sorted(b));
        for (x, y) in a.iter().zip(&b) {
            let o = cand_order(&cands[*x], &cands[*y]).then(x.cmp(y));
            if o != Ordering::Equal {
                return o;
            }
        }
        b.len().cmp(&a.len())
    }
    let mut best = None;
    rec(0, cands, n, &mut Vec::new(), &mut vec![false; cands.len()], &mut best);
    let mut v = best.unwrap().1;
    v.sort_unstable();
    v
}

/// Central finite-difference check of every parameter tensor. `loss(model,
/// true)` must return the loss and its gradients; `loss(model, false)` only
/// the loss. Returns `(param name, worst relative error)` per tensor.
pub fn grad_check<M>(
    model: &mut M,
    params_mut: impl Fn(&mut M) -> Vec<&mut fspad::tensor::Param<f64>>,
    loss: impl Fn(&M, bool) -> (f64, Option<fspad::tensor::Gradients<f64>>),
    per_param: usize,
    seed: u64,
) -> Vec<(String, f64)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (_, grads) = loss(model, true);
    let grads = grads.expect("gradients requested");
    let shapes: Vec<(String, usize)> = params_mut(model)
        .iter()
        .map(|p| (p.name().to_string(), p.data().len()))
        .collect();
    let eps = 1e-6;
    let mut out = Vec::new();
    for (pi, (name, numel)) in shapes.into_iter().enumerate() {
        let analytic = grads.by_name(&name).map(|g| g.data().to_vec());
        let mut worst = 0f64;
        for _ in 0..per_param.min(numel) {
            let j = rng.random_range(0..numel);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            let orig = params_mut(model)[pi].data()[j];
            params_mut(model)[pi].data_mut()[j] = orig + eps;
            let lp = loss(model, false).0;
            params_mut(model)[pi].data_mut()[j] = orig - eps;
            let lm = loss(model, false).0;
            params_mut(model)[pi].data_mut()[j] = orig;
            let n = (lp - lm) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        out.push((name, worst));
    }
    out
}
