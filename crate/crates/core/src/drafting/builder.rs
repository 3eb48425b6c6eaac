use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::tree::TokenTree;
use crate::error::{Error, Result};

/// Shape of the dynamic draft tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    /// Maximum depth `D` below the root.
    pub depth: usize,
    /// Children proposed per expanded node.
    pub top_k: usize,
    /// Frontier nodes expanded per level.
    pub select_m: usize,
    /// Drafted nodes kept after pruning (root not counted).
    pub budget: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            top_k: 8,
            select_m: 8,
            budget: 60,
        }
    }
}

impl TreeConfig {
    pub fn halved() -> Self {
        Self {
            top_k: 4,
            budget: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.top_k == 0 || self.select_m == 0 {
            return Err(Error::contract("depth, top_k and select_m must be at least 1"));
        }
        if self.budget == 0 {
            return Err(Error::contract("tree budget must be at least 1"));
        }
        Ok(())
    }
}

/// Candidate order: higher joint probability, then shallower, then smaller
/// token id, then earlier creation.
pub fn rank(tree: &TokenTree, a: usize, b: usize) -> Ordering {
    let (x, y) = (tree.node(a), tree.node(b));
    y.joint_prob
        .partial_cmp(&x.joint_prob)
        .unwrap_or(Ordering::Equal)
        .then(x.depth.cmp(&y.depth))
        .then(x.token.cmp(&y.token))
        .then(a.cmp(&b))
}

/// The `k` most probable tokens, ties to the smaller id. Zero-probability
/// tokens are never proposed.
pub fn top_k_tokens(probs: &[f32], k: usize) -> Result<Vec<(u32, f64)>> {
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric { op: "draft_probs" });
    }
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx.into_iter().map(|i| (i as u32, probs[i] as f64)).collect())
}

/// Beam-style expansion followed by global top-`budget` pruning.
///
/// `expand` receives the working tree and the frontier nodes chosen at this
/// level and must return one next-token distribution per node; it may also
/// record per-node features.
pub fn grow_tree<F>(root: u32, root_probs: &[f32], cfg: &TreeConfig, mut expand: F) -> Result<TokenTree>
where
    F: FnMut(&mut TokenTree, &[usize]) -> Result<Vec<Vec<f32>>>,
{
    cfg.validate()?;
    let mut tree = TokenTree::new(root);
    let mut frontier = Vec::new();
    for (tok, p) in top_k_tokens(root_probs, cfg.top_k)? {
        frontier.push(tree.push(0, tok, p)?);
    }
    for _ in 1..cfg.depth {
        frontier.sort_by(|&a, &b| rank(&tree, a, b));
        frontier.truncate(cfg.select_m);
        if frontier.is_empty() {
            break;
        }
        let dists = expand(&mut tree, &frontier)?;
        if dists.len() != frontier.len() {
            return Err(Error::contract("expansion returned the wrong number of rows"));
        }
        let mut next = Vec::new();
        for (&node, probs) in frontier.iter().zip(&dists) {
            for (tok, p) in top_k_tokens(probs, cfg.top_k)? {
                next.push(tree.push(node, tok, p)?);
            }
        }
        frontier = next;
    }
    let mut cand: Vec<usize> = (1..tree.len()).collect();
    cand.sort_by(|&a, &b| rank(&tree, a, b));
    cand.truncate(cfg.budget);
    tree.subtree(&cand)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(v: usize, hot: usize) -> Vec<f32> {
        let mut p = vec![0.0; v];
        p[hot] = 1.0;
        p
    }

    #[test]
    fn single_level_keeps_root_top_k() {
        let probs = [0.1, 0.4, 0.05, 0.3, 0.15];
        let cfg = TreeConfig {
            depth: 1,
            top_k: 3,
            select_m: 3,
            budget: 3,
        };
        let t = grow_tree(9, &probs, &cfg, |_, _| unreachable!()).unwrap();
        let toks: Vec<u32> = t.nodes()[1..].iter().map(|n| n.token).collect();
        assert_eq!(toks, vec![1, 3, 4]);
    }

    #[test]
    fn one_hot_drafts_give_a_chain() {
        let cfg = TreeConfig {
            depth: 4,
            top_k: 3,
            select_m: 2,
            budget: 4,
        };
        let t = grow_tree(0, &one_hot(6, 1), &cfg, |tree, nodes| {
            Ok(nodes
                .iter()
                .map(|&n| one_hot(6, (tree.node(n).token as usize + 1) % 6))
                .collect())
        })
        .unwrap();
        assert_eq!(t.num_drafted(), 4);
        for (i, n) in t.nodes().iter().enumerate().skip(1) {
            assert_eq!(n.parent, Some(i - 1));
            assert_eq!(n.joint_prob, 1.0);
            assert_eq!(n.token, i as u32);
        }
    }

    #[test]
    fn ties_prefer_shallow_then_small_tokens() {
        let cfg = TreeConfig {
            depth: 2,
            top_k: 2,
            select_m: 1,
            budget: 2,
        };
        let t = grow_tree(0, &[0.0, 0.5, 0.5], &cfg, |_, nodes| {
            Ok(nodes.iter().map(|_| vec![1.0, 0.0, 0.0]).collect())
        })
        .unwrap();
        let toks: Vec<(u32, usize)> = t.nodes()[1..].iter().map(|n| (n.token, n.depth)).collect();
        assert_eq!(toks, vec![(1, 1), (2, 1)]);
    }

    #[test]
    fn nan_distribution_is_numeric_error() {
        let cfg = TreeConfig::default();
        let err = grow_tree(0, &[f32::NAN, 0.5], &cfg, |_, _| unreachable!());
        assert!(matches!(err, Err(Error::Numeric { .. })));
    }

    #[test]
    fn zero_budget_is_contract_error() {
        let cfg = TreeConfig {
            budget: 0,
            ..TreeConfig::default()
        };
        let err = grow_tree(0, &[1.0], &cfg, |_, _| unreachable!());
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
