use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AttnMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: u32,
    pub parent: Option<usize>,
    pub depth: usize,
    pub cond_prob: f64,
    pub joint_prob: f64,
    /// Draft feature produced when this node was expanded, if it was.
    #[serde(skip)]
    pub feature: Option<Vec<f32>>,
}

/// Candidate tokens rooted at the last committed token. Node 0 is the root;
/// parents always precede their children.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTree {
    nodes: Vec<TreeNode>,
}

/// Flattened tree ready for one target pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatTree {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub parents: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Dump {
    nodes: Vec<TreeNode>,
}

impl TokenTree {
    pub fn new(root: u32) -> Self {
        Self {
            nodes: vec![TreeNode {
                token: root,
                parent: None,
                depth: 0,
                cond_prob: 1.0,
                joint_prob: 1.0,
                feature: None,
            }],
        }
    }

    pub fn push(&mut self, parent: usize, token: u32, cond_prob: f64) -> Result<usize> {
        let p = self.nodes.get(parent).ok_or(Error::Index {
            op: "tree_push",
            index: parent,
            size: self.nodes.len(),
        })?;
        if !(0.0..=1.0).contains(&cond_prob) {
            return Err(Error::contract(format!(
                "conditional probability {cond_prob} outside [0, 1]"
            )));
        }
        let node = TreeNode {
            token,
            parent: Some(parent),
            depth: p.depth + 1,
            cond_prob,
            joint_prob: p.joint_prob * cond_prob,
            feature: None,
        };
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    /// Rebuilds a tree from flattened parent pointers (entry 0 is the root).
    pub fn from_parents(tokens: &[u32], parents: &[Option<usize>], cond_probs: &[f64]) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != parents.len() || tokens.len() != cond_probs.len() {
            return Err(Error::contract("tree arrays must be nonempty and of equal length"));
        }
        if parents[0].is_some() {
            return Err(Error::contract("node 0 must be the root"));
        }
        let mut tree = TokenTree::new(tokens[0]);
        for i in 1..tokens.len() {
            match parents[i] {
                Some(p) if p < i => {
                    tree.push(p, tokens[i], cond_probs[i])?;
                }
                Some(p) => {
                    return Err(Error::contract(format!(
                        "node {i} has parent {p}, order is not topological"
                    )))
                }
                None => return Err(Error::contract(format!("node {i} has no parent"))),
            }
        }
        Ok(tree)
    }

    /// Checks parent order, depths, probabilities and sibling uniqueness.
    pub fn validate(&self) -> Result<()> {
        let root = &self.nodes[0];
        if root.parent.is_some() || root.depth != 0 || root.joint_prob != 1.0 {
            return Err(Error::contract("malformed tree root"));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let p = match n.parent {
                Some(p) if p < i => p,
                _ => {
                    return Err(Error::contract(format!(
                        "node {i} does not follow its parent"
                    )))
                }
            };
            let pn = &self.nodes[p];
            if n.depth != pn.depth + 1 {
                return Err(Error::contract(format!("node {i} has inconsistent depth")));
            }
            if !(0.0..=1.0).contains(&n.cond_prob) || n.joint_prob != pn.joint_prob * n.cond_prob {
                return Err(Error::contract(format!("node {i} has inconsistent probabilities")));
            }
            if !seen.insert((p, n.token)) {
                return Err(Error::contract(format!(
                    "token {} appears twice under node {p}",
                    n.token
                )));
            }
        }
        Ok(())
    }

    /// Number of nodes including the root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of drafted (non-root) nodes.
    pub fn num_drafted(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn root_token(&self) -> u32 {
        self.nodes[0].token
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut TreeNode {
        &mut self.nodes[i]
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (i + 1..self.nodes.len())
            .filter(|&c| self.nodes[c].parent == Some(i))
            .collect()
    }

    /// Ancestors of `i` from its parent up to the root.
    pub fn ancestors(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.nodes[i].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out
    }

    /// Tokens on the path root -> `i`, root excluded.
    pub fn path_tokens(&self, i: usize) -> Vec<u32> {
        let mut path: Vec<u32> = std::iter::once(i)
            .chain(self.ancestors(i))
            .filter(|&n| n != 0)
            .map(|n| self.nodes[n].token)
            .collect();
        path.reverse();
        path
    }

    pub fn flatten(&self, prefix_len: usize) -> FlatTree {
        FlatTree {
            tokens: self.nodes.iter().map(|n| n.token).collect(),
            positions: self.nodes.iter().map(|n| prefix_len + n.depth).collect(),
            parents: self.nodes.iter().map(|n| n.parent).collect(),
        }
    }

    /// `[nodes, prefix_len + nodes]` mask for the tree rows when the prefix
    /// already sits in a cache.
    pub fn verification_mask(&self, prefix_len: usize) -> Result<AttnMask> {
        self.validate()?;
        let n = self.nodes.len();
        let cols = prefix_len + n;
        let mut allow = vec![false; n * cols];
        for i in 0..n {
            let row = &mut allow[i * cols..(i + 1) * cols];
            row[..prefix_len].iter_mut().for_each(|a| *a = true);
            row[prefix_len + i] = true;
            let mut cur = self.nodes[i].parent;
            while let Some(p) = cur {
                row[prefix_len + p] = true;
                cur = self.nodes[p].parent;
            }
        }
        AttnMask::explicit(n, cols, allow)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Dump {
            nodes: self.nodes.clone(),
        })
        .expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dump: Dump = serde_json::from_str(s)?;
        if dump.nodes.is_empty() {
            return Err(Error::contract("empty tree dump"));
        }
        let tree = TokenTree { nodes: dump.nodes };
        tree.validate()?;
        Ok(tree)
    }

    /// Keeps only the listed nodes (the root is always kept). The subset must
    /// be ancestor-closed; relative order is preserved.
    pub fn subtree(&self, keep: &[usize]) -> Result<Self> {
        let mut keep: Vec<usize> = keep.iter().copied().filter(|&i| i != 0).collect();
        keep.sort_unstable();
        keep.dedup();
        let mut remap = vec![usize::MAX; self.nodes.len()];
        remap[0] = 0;
        let mut nodes = vec![self.nodes[0].clone()];
        for &i in &keep {
            let node = self.nodes.get(i).ok_or(Error::Index {
                op: "subtree",
                index: i,
                size: self.nodes.len(),
            })?;
            let p = node.parent.expect("non-root");
            if remap[p] == usize::MAX {
                return Err(Error::contract(format!(
                    "node {i} kept without its parent {p}"
                )));
            }
            remap[i] = nodes.len();
            let mut n = node.clone();
            n.parent = Some(remap[p]);
            nodes.push(n);
        }
        Ok(TokenTree { nodes })
    }
}

/// Square mask over `prefix_len + tree.len()` positions: prefix rows are
/// causal, tree rows see the whole prefix plus their own ancestors and self.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeMask {
    pub size: usize,
    pub allow: Vec<bool>,
}

impl TreeMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size + j]
    }
}

pub fn tree_attention_mask(tree: &TokenTree, prefix_len: usize) -> Result<TreeMask> {
    let size = prefix_len + tree.len();
    let mut allow = vec![false; size * size];
    for i in 0..prefix_len {
        allow[i * size..i * size + i + 1].iter_mut().for_each(|a| *a = true);
    }
    let AttnMask::Explicit { allow: rows, cols, .. } = tree.verification_mask(prefix_len)? else {
        unreachable!("verification mask is explicit")
    };
    for i in 0..tree.len() {
        let dst = (prefix_len + i) * size;
        allow[dst..dst + size].copy_from_slice(&rows[i * cols..(i + 1) * cols]);
    }
    Ok(TreeMask { size, allow })
}
