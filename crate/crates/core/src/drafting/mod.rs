//! Dynamic token trees: construction from draft distributions, pruning to a
//! node budget, flattening and tree attention masks.

mod builder;
mod proposer;
mod tree;

pub use builder::{grow_tree, rank, top_k_tokens, TreeConfig};
pub use proposer::{DraftContext, FspadProposer, Proposer, ReferenceProposer};
pub use tree::{tree_attention_mask, FlatTree, TokenTree, TreeMask, TreeNode};
