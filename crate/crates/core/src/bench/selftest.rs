use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::drafting::{tree_attention_mask, FspadProposer, ReferenceProposer, TokenTree, TreeConfig};
use crate::error::Result;
use crate::models::{load_draft, load_target, save_draft, save_target, DraftStack, ModelConfig, TargetModel, Variant};
use crate::verification::{generate, vanilla_generate, GenerateConfig};

#[derive(Clone, Debug, Serialize)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn micro() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        hidden_size: 8,
        intermediate_size: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 64,
        rope_base: 10_000.0,
    }
}

fn sharpen<'a>(params: impl IntoIterator<Item = &'a mut crate::tensor::Param>, k: f32) {
    for p in params {
        if p.shape().len() == 2 {
            p.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn lossless(seed: u64) -> Result<SelfCheck> {
    let mut target = TargetModel::new(micro(), seed)?;
    sharpen(target.params_mut(), 40.0);
    let mut bad = Vec::new();
    for v in Variant::ALL {
        let mut stack = DraftStack::new(micro(), v, seed + 1)?;
        sharpen(stack.params_mut(), 30.0);
        let prompt = [1, 5, 9, 2];
        let want = vanilla_generate(&target, &prompt, 32, 0.0, 0, None)?;
        let mut p = FspadProposer::new(&target, &stack)?;
        let got = generate(&target, &mut p, &prompt, &GenerateConfig { max_new: 32, ..Default::default() })?;
        if got.tokens != want.tokens {
            bad.push(v.as_str());
        }
    }
    Ok(SelfCheck {
        name: "greedy_lossless",
        passed: bad.is_empty(),
        detail: if bad.is_empty() { "all variants match vanilla".into() } else { format!("mismatch: {bad:?}") },
    })
}

fn ceiling(seed: u64) -> Result<SelfCheck> {
    let target = TargetModel::new(micro(), seed)?;
    let prompt = vec![3, 1, 4];
    let reference = vanilla_generate(&target, &prompt, 40, 0.0, 0, None)?;
    let mut full = prompt.clone();
    full.extend(&reference.tokens);
    let cfg = GenerateConfig {
        max_new: 24,
        tree: TreeConfig { depth: 5, top_k: 1, select_m: 1, budget: 5 },
        ..Default::default()
    };
    let mut taus = Vec::new();
    for corrupt in [false, true] {
        let mut p = ReferenceProposer { reference: full.clone(), corrupt, vocab_size: 24 };
        taus.push(generate(&target, &mut p, &prompt, &cfg)?.tau());
    }
    Ok(SelfCheck {
        name: "draft_ceiling",
        passed: taus == [6.0, 1.0],
        detail: format!("oracle tau {}, wrong tau {}", taus[0], taus[1]),
    })
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Result<TokenTree> {
    let mut t = TokenTree::new(rng.random_range(100..150));
    for i in 1..n {
        let parent = rng.random_range(0..i);
        t.push(parent, i as u32, 0.5)?;
    }
    Ok(t)
}

fn masks(seed: u64) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=30);
        let prefix = rng.random_range(0..5);
        let tree = random_tree(&mut rng, n)?;
        let m = tree_attention_mask(&tree, prefix)?;
        for i in 0..n {
            let mut chain = vec![false; n];
            let mut cur = Some(i);
            while let Some(c) = cur {
                chain[c] = true;
                cur = tree.node(c).parent;
            }
            let ok = (0..prefix).all(|j| m.get(prefix + i, j)) && (0..n).all(|j| m.get(prefix + i, prefix + j) == chain[j]);
            if !ok {
                failures += 1;
            }
        }
    }
    Ok(SelfCheck {
        name: "tree_mask",
        passed: failures == 0,
        detail: format!("{failures} mismatched rows over 200 trees"),
    })
}

fn checkpoints(seed: u64) -> Result<SelfCheck> {
    let dir = std::env::temp_dir().join(format!("fspad-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
    let target = TargetModel::new(micro(), seed)?;
    let stack = DraftStack::new(micro(), Variant::Fspad, seed)?;
    let (tp, dp) = (dir.join("t.ckpt"), dir.join("d.ckpt"));
    save_target(&target, &tp)?;
    save_draft(&stack, &dp)?;
    let t2 = load_target(&tp)?;
    let d2 = load_draft(&dp)?;
    let same = |a: Vec<&crate::tensor::Param>, b: Vec<&crate::tensor::Param>| {
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    };
    let mut bytes = std::fs::read(&tp).map_err(|e| crate::Error::io(&tp, e))?;
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&tp, &bytes).map_err(|e| crate::Error::io(&tp, e))?;
    let rejected = load_target(&tp).is_err();
    let _ = std::fs::remove_dir_all(&dir);
    let exact = same(target.params(), t2.params()) && same(stack.params(), d2.params());
    Ok(SelfCheck {
        name: "checkpoint_round_trip",
        passed: exact && rejected,
        detail: format!("bit-exact {exact}, truncated file rejected {rejected}"),
    })
}

/// Quick internal consistency checks on tiny random models.
pub fn selftest(seed: u64) -> Result<Vec<SelfCheck>> {
    Ok(vec![lossless(seed)?, ceiling(seed)?, masks(seed)?, checkpoints(seed)?])
}
