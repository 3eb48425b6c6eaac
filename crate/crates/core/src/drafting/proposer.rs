use super::builder::{grow_tree, TreeConfig};
use super::tree::TokenTree;
use crate::error::{Error, Result};
use crate::models::{DraftStack, KvCache, TargetModel};
use crate::tensor::{AttnMask, Tape, Tensor};

/// What a proposer sees at the start of a decoding step.
pub struct DraftContext<'a> {
    /// Committed tokens followed by the root (last emitted) token.
    pub tokens: &'a [u32],
    /// Target features of every committed position except the root,
    /// row-major `[tokens.len() - 1, hidden]`.
    pub features: &'a [f32],
    pub tree: TreeConfig,
}

impl DraftContext<'_> {
    pub fn prefix_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn root(&self) -> u32 {
        self.tokens[self.tokens.len() - 1]
    }
}

/// Produces a candidate tree for the next verification pass.
pub trait Proposer {
    /// Forget all per-sequence state.
    fn reset(&mut self);
    fn propose(&mut self, ctx: &DraftContext<'_>) -> Result<TokenTree>;
    /// Draft forward passes spent on the most recent proposal.
    fn last_passes(&self) -> usize {
        0
    }
}

/// Draft stack driving dynamic tree construction.
///
/// Draft row `p` consumes `(F_p, e(x_{p+1}))`; the row for the last committed
/// position pairs with the root token and its output seeds the tree. Rows for
/// committed positions stay cached across steps; tree rows are dropped once
/// the tree is built.
pub struct FspadProposer<'m> {
    target: &'m TargetModel,
    stack: &'m DraftStack,
    cache: KvCache,
    synced: Vec<u32>,
    passes: usize,
}

impl<'m> FspadProposer<'m> {
    pub fn new(target: &'m TargetModel, stack: &'m DraftStack) -> Result<Self> {
        if target.config != stack.config {
            return Err(Error::Config("draft and target model configs differ".into()));
        }
        Ok(Self {
            target,
            stack,
            cache: stack.new_cache(),
            synced: Vec::new(),
            passes: 0,
        })
    }

    /// Committed draft rows currently cached.
    pub fn cached_rows(&self) -> usize {
        self.cache.len()
    }

    fn forward(
        &mut self,
        feats: Vec<f32>,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttnMask,
    ) -> Result<(Tensor, Tensor)> {
        let h = self.stack.config.hidden_size;
        let n = tokens.len();
        self.passes += 1;
        let tape = Tape::inference();
        let f = tape.constant(Tensor::new([1, n, h], feats)?);
        let out = self
            .stack
            .step(&tape, self.target, f, tokens, positions, mask, Some(&mut self.cache))?;
        let probs = out
            .logits
            .value()
            .reshape([n, self.stack.config.vocab_size])?
            .softmax_last()?;
        let f = out.f.value().reshape([n, h])?;
        Ok((probs, f))
    }
}

impl Proposer for FspadProposer<'_> {
    fn reset(&mut self) {
        self.cache.clear();
        self.synced.clear();
        self.passes = 0;
    }

    fn last_passes(&self) -> usize {
        self.passes
    }

    fn propose(&mut self, ctx: &DraftContext<'_>) -> Result<TokenTree> {
        self.passes = 0;
        let l = ctx.prefix_len();
        let h = self.stack.config.hidden_size;
        if ctx.features.len() != l * h {
            return Err(Error::Shape {
                op: "draft_context",
                lhs: vec![ctx.features.len()],
                rhs: vec![l, h],
            });
        }
        if l == 0 {
            return Ok(TokenTree::new(ctx.root()));
        }
        ctx.tree.validate()?;

        // Reuse cached rows whose (feature, next token) inputs are unchanged;
        // the row at l - 1 is always recomputed to get the root output.
        let common = self
            .synced
            .iter()
            .zip(ctx.tokens)
            .take_while(|(a, b)| a == b)
            .count();
        let start = common.saturating_sub(1).min(self.cache.len()).min(l - 1);
        self.cache.truncate(start);
        let extra = (ctx.tree.depth - 1) * ctx.tree.select_m;
        self.cache
            .set_capacity(self.stack.config.max_seq_len + extra);

        let toks = &ctx.tokens[start + 1..=l];
        let positions: Vec<usize> = (start..l).collect();
        let feats = ctx.features[start * h..l * h].to_vec();
        let (probs, f) = self.forward(feats, toks, &positions, &AttnMask::Causal { offset: start })?;
        self.synced = ctx.tokens.to_vec();
        let last = l - start - 1;
        let root_probs = probs.row(last).to_vec();

        // Draft-cache row of each expanded tree node.
        let mut rows: Vec<Option<usize>> = vec![Some(l - 1)];
        let mut root_feature = Some(f.row(last).to_vec());

        let result = grow_tree(ctx.root(), &root_probs, &ctx.tree, |tree, nodes| {
            if let Some(rf) = root_feature.take() {
                tree.node_mut(0).feature = Some(rf);
            }
            let base = self.cache.len();
            let n = nodes.len();
            let cols = base + n;
            let mut allow = vec![false; n * cols];
            let mut feats = Vec::with_capacity(n * h);
            let mut toks = Vec::with_capacity(n);
            let mut positions = Vec::with_capacity(n);
            for (i, &node) in nodes.iter().enumerate() {
                let row = &mut allow[i * cols..(i + 1) * cols];
                row[..l].iter_mut().for_each(|a| *a = true);
                row[base + i] = true;
                for a in tree.ancestors(node) {
                    let r = rows[a].ok_or_else(|| Error::contract("ancestor was never expanded"))?;
                    row[r] = true;
                }
                let parent = tree.node(node).parent.expect("frontier node has a parent");
                let pf = tree
                    .node(parent)
                    .feature
                    .as_ref()
                    .ok_or_else(|| Error::contract("parent feature missing"))?;
                feats.extend_from_slice(pf);
                toks.push(tree.node(node).token);
                positions.push(l - 1 + tree.node(node).depth);
            }
            let mask = AttnMask::explicit(n, cols, allow)?;
            let (probs, f) = self.forward(feats, &toks, &positions, &mask)?;
            rows.resize(tree.len(), None);
            let mut out = Vec::with_capacity(n);
            for (i, &node) in nodes.iter().enumerate() {
                rows[node] = Some(base + i);
                tree.node_mut(node).feature = Some(f.row(i).to_vec());
                out.push(probs.row(i).to_vec());
            }
            Ok(out)
        });
        self.cache.truncate(l);
        let mut tree = result?;
        if let Some(rf) = root_feature {
            tree.node_mut(0).feature = Some(rf);
        }
        Ok(tree)
    }
}

/// Proposes a chain read from a known continuation. With `corrupt`, every
/// drafted token is shifted by one so it never matches.
pub struct ReferenceProposer {
    pub reference: Vec<u32>,
    pub corrupt: bool,
    pub vocab_size: u32,
}

impl Proposer for ReferenceProposer {
    fn reset(&mut self) {}

    fn propose(&mut self, ctx: &DraftContext<'_>) -> Result<TokenTree> {
        let root_at = ctx.tokens.len();
        let mut tree = TokenTree::new(ctx.root());
        let len = ctx.tree.depth.min(ctx.tree.budget);
        let mut parent = 0;
        for &t in self.reference.iter().skip(root_at).take(len) {
            let t = if self.corrupt { (t + 1) % self.vocab_size } else { t };
            parent = tree.push(parent, t, 1.0)?;
        }
        Ok(tree)
    }
}
