use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drafting::TokenTree;
use crate::error::{Error, Result};
use crate::models::KvCache;
use crate::tensor::{argmax, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyResult {
    /// Accepted tree nodes, root child first.
    pub accepted_path: Vec<usize>,
    pub accepted_tokens: Vec<u32>,
    pub bonus_token: u32,
    pub target_forward_passes: usize,
}

impl VerifyResult {
    pub fn emitted(&self) -> usize {
        self.accepted_tokens.len() + 1
    }
}

fn check_rows<T: Real>(tree: &TokenTree, t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.rank() != 2 || t.rows() != tree.len() {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![tree.len()],
        });
    }
    Ok(())
}

/// Exact-match acceptance. `logits` has one row per tree node (root first).
pub fn verify_greedy(tree: &TokenTree, logits: &Tensor) -> Result<VerifyResult> {
    check_rows(tree, logits, "verify_greedy")?;
    let mut cur = 0;
    let mut path = Vec::new();
    loop {
        let want = argmax(logits.row(cur)) as u32;
        match tree.children(cur).into_iter().find(|&c| tree.node(c).token == want) {
            Some(c) => {
                path.push(c);
                cur = c;
            }
            None => {
                return Ok(VerifyResult {
                    accepted_tokens: path.iter().map(|&n| tree.node(n).token).collect(),
                    accepted_path: path,
                    bonus_token: want,
                    target_forward_passes: 1,
                })
            }
        }
    }
}

/// Softmax of `logits / temperature` per row, in f64.
pub fn target_probs(logits: &Tensor, temperature: f64) -> Result<Tensor<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::contract("sampling temperature must be positive"));
    }
    logits.cast::<f64>().map(|v| v / temperature).softmax_last()
}

/// Inverse-CDF draw from an unnormalised nonnegative weight vector.
pub fn sample_index(weights: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric { op: "sample" });
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Rejection-sampling acceptance over the tree.
///
/// Every drafted child is a deterministic proposal, so each one is tested as a
/// point mass: accepted with probability `p(x)` under the current residual,
/// otherwise `p(x)` is zeroed and the residual renormalised. Children are
/// tried in descending draft probability. When no child survives, the bonus
/// token is drawn from the residual.
pub fn verify_stochastic(tree: &TokenTree, probs: &Tensor<f64>, rng: &mut impl Rng) -> Result<VerifyResult> {
    check_rows(tree, probs, "verify_stochastic")?;
    let mut cur = 0;
    let mut path = Vec::new();
    let mut p = probs.row(0).to_vec();
    'walk: loop {
        let mut kids = tree.children(cur);
        for &c in &kids {
            let q = tree.node(c).cond_prob;
            if !(q > 0.0) {
                return Err(Error::contract(format!(
                    "drafted token {} has zero draft probability",
                    tree.node(c).token
                )));
            }
        }
        kids.sort_by(|&a, &b| {
            let (x, y) = (tree.node(a), tree.node(b));
            y.cond_prob
                .partial_cmp(&x.cond_prob)
                .unwrap()
                .then(x.token.cmp(&y.token))
                .then(a.cmp(&b))
        });
        for c in kids {
            let x = tree.node(c).token as usize;
            if x >= p.len() {
                return Err(Error::Index {
                    op: "verify_stochastic",
                    index: x,
                    size: p.len(),
                });
            }
            let total: f64 = p.iter().sum();
            let px = p[x] / total;
            if rng.random::<f64>() < px {
                path.push(c);
                cur = c;
                p = probs.row(c).to_vec();
                continue 'walk;
            }
            p[x] = 0.0;
        }
        let bonus = sample_index(&p, rng)? as u32;
        return Ok(VerifyResult {
            accepted_tokens: path.iter().map(|&n| tree.node(n).token).collect(),
            accepted_path: path,
            bonus_token: bonus,
            target_forward_passes: 1,
        });
    }
}

/// Drops rejected tree rows from a cache holding `prefix_len` committed rows
/// followed by the flattened tree. Returns the new committed length
/// (`prefix_len + 1 + accepted`); the bonus token becomes the next root.
pub fn commit(cache: &mut KvCache, tree: &TokenTree, prefix_len: usize, result: &VerifyResult) -> Result<usize> {
    let mut prev = 0;
    for &n in &result.accepted_path {
        if n >= tree.len() || tree.node(n).parent != Some(prev) {
            return Err(Error::contract(format!(
                "accepted path {:?} is not a root-anchored chain",
                result.accepted_path
            )));
        }
        prev = n;
    }
    if cache.len() != prefix_len + tree.len() {
        return Err(Error::contract(format!(
            "cache holds {} rows, expected prefix {} plus {} tree rows",
            cache.len(),
            prefix_len,
            tree.len()
        )));
    }
    let keep: Vec<usize> = (0..=prefix_len)
        .chain(result.accepted_path.iter().map(|&n| prefix_len + n))
        .collect();
    cache.retain_rows(&keep)?;
    Ok(keep.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits_rows(rows: &[&[f32]]) -> Tensor {
        let v = rows[0].len();
        Tensor::new([rows.len(), v], rows.concat()).unwrap()
    }

    #[test]
    fn greedy_walks_matching_children() {
        let mut t = TokenTree::new(0);
        let a = t.push(0, 2, 0.6).unwrap();
        t.push(0, 1, 0.3).unwrap();
        t.push(a, 1, 0.9).unwrap();
        let l = logits_rows(&[&[0., 1., 5.], &[3., 0., 1.], &[0., 9., 0.], &[0., 1., 2.]]);
        let r = verify_greedy(&t, &l).unwrap();
        assert_eq!(r.accepted_path, vec![a]);
        assert_eq!(r.accepted_tokens, vec![2]);
        assert_eq!(r.bonus_token, 0);
        assert_eq!(r.emitted(), 2);
    }

    #[test]
    fn greedy_without_match_emits_bonus_only() {
        let mut t = TokenTree::new(0);
        t.push(0, 1, 0.6).unwrap();
        let l = logits_rows(&[&[0., 1., 5.], &[0., 0., 0.]]);
        let r = verify_greedy(&t, &l).unwrap();
        assert!(r.accepted_tokens.is_empty());
        assert_eq!(r.bonus_token, 2);
        assert_eq!(r.target_forward_passes, 1);
    }

    #[test]
    fn certain_agreement_is_always_accepted() {
        let mut t = TokenTree::new(0);
        t.push(0, 1, 1.0).unwrap();
        let p = Tensor::<f64>::new([2, 3], vec![0., 1., 0., 0.5, 0.5, 0.]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let r = verify_stochastic(&t, &p, &mut rng).unwrap();
            assert_eq!(r.accepted_tokens, vec![1]);
            assert!(r.bonus_token < 2);
        }
    }

    #[test]
    fn impossible_child_is_always_rejected() {
        let mut t = TokenTree::new(0);
        t.push(0, 0, 0.7).unwrap();
        let p = Tensor::<f64>::new([2, 3], vec![0., 0.25, 0.75, 1., 0., 0.]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            let r = verify_stochastic(&t, &p, &mut rng).unwrap();
            assert!(r.accepted_tokens.is_empty());
            counts[r.bonus_token as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!((counts[1] as f64 / n as f64 - 0.25).abs() < 0.02);
    }

    #[test]
    fn zero_draft_probability_is_contract_error() {
        let mut t = TokenTree::new(0);
        t.push(0, 1, 0.0).unwrap();
        let p = Tensor::<f64>::new([2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(verify_stochastic(&t, &p, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn commit_keeps_prefix_root_and_path() {
        let mut t = TokenTree::new(0);
        let a = t.push(0, 1, 0.5).unwrap();
        t.push(0, 2, 0.5).unwrap();
        let c = t.push(a, 3, 0.5).unwrap();
        // 2 prefix rows + 4 tree rows, each holding its row index.
        let mut cache = KvCache::new(1, 1, 16);
        for i in 0..6 {
            cache.push_row_for_test(i as f32);
        }
        let r = VerifyResult {
            accepted_path: vec![a, c],
            accepted_tokens: vec![1, 3],
            bonus_token: 0,
            target_forward_passes: 1,
        };
        assert_eq!(commit(&mut cache, &t, 2, &r).unwrap(), 5);
        assert_eq!(cache.layer_rows(0).0, &[0., 1., 2., 3., 5.]);

        let bad = VerifyResult {
            accepted_path: vec![c],
            ..r
        };
        assert!(commit(&mut cache, &t, 2, &bad).is_err());
    }

    #[test]
    fn zero_acceptance_commits_one_row() {
        let mut t = TokenTree::new(0);
        t.push(0, 1, 0.5).unwrap();
        let mut cache = KvCache::new(1, 1, 16);
        for i in 0..5 {
            cache.push_row_for_test(i as f32);
        }
        let r = VerifyResult {
            accepted_path: vec![],
            accepted_tokens: vec![],
            bonus_token: 4,
            target_forward_passes: 1,
        };
        assert_eq!(commit(&mut cache, &t, 3, &r).unwrap(), 4);
        assert_eq!(cache.len(), 4);
    }

    #[test]
    fn sample_index_follows_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_index(&[0.0, 2.0, 0.0], &mut rng).unwrap(), 1);
        assert!(sample_index(&[0.0, 0.0], &mut rng).is_err());
    }
}
