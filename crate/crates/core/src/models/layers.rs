use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{AttnMask, Param, Real, Tape, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-6;
pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal_param<T: Real>(
    name: &str,
    shape: &[usize],
    std: f64,
    rng: &mut impl Rng,
) -> Param<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Param::new(name, Tensor::new(shape.to_vec(), data).expect("shape"))
}

pub(crate) fn ones_param<T: Real>(name: &str, n: usize) -> Param<T> {
    Param::new(name, Tensor::full([n], T::one()))
}

pub(crate) fn zeros_param<T: Real>(name: &str, shape: &[usize]) -> Param<T> {
    Param::new(name, Tensor::zeros(shape.to_vec()))
}

/// Cached keys (post-rotary) and values of one layer, one row per position.
#[derive(Clone, Debug, Default)]
pub struct LayerKv<T: Real = f32> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Per-layer key/value cache for single-sequence incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache<T: Real = f32> {
    layers: Vec<LayerKv<T>>,
    width: usize,
    capacity: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(n_layers: usize, width: usize, capacity: usize) -> Self {
        Self {
            layers: (0..n_layers).map(|_| LayerKv::default()).collect(),
            width,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.k.len() / self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity;
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn clear(&mut self) {
        self.truncate(0);
    }

    pub fn truncate(&mut self, len: usize) {
        let w = self.width;
        for l in &mut self.layers {
            l.k.truncate(len * w);
            l.v.truncate(len * w);
        }
    }

    /// Keeps only the listed rows, in the given order (must be increasing).
    pub fn retain_rows(&mut self, rows: &[usize]) -> Result<()> {
        let len = self.len();
        if rows.windows(2).any(|w| w[0] >= w[1]) || rows.last().is_some_and(|&r| r >= len) {
            return Err(Error::contract(format!(
                "cache rows {rows:?} are not increasing indices below {len}"
            )));
        }
        let w = self.width;
        for l in &mut self.layers {
            for (dst, &src) in rows.iter().enumerate() {
                if dst != src {
                    l.k.copy_within(src * w..(src + 1) * w, dst * w);
                    l.v.copy_within(src * w..(src + 1) * w, dst * w);
                }
            }
            l.k.truncate(rows.len() * w);
            l.v.truncate(rows.len() * w);
        }
        Ok(())
    }

    pub(crate) fn check_room(&self, extra: usize) -> Result<()> {
        let needed = self.len() + extra;
        if needed > self.capacity {
            return Err(Error::Capacity {
                needed,
                max: self.capacity,
            });
        }
        Ok(())
    }

    pub fn layer_rows(&self, layer: usize) -> (&[T], &[T]) {
        (&self.layers[layer].k, &self.layers[layer].v)
    }
}

#[derive(Clone, Debug)]
pub struct Attention<T: Real = f32> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
}

#[derive(Clone, Debug)]
pub struct Mlp<T: Real = f32> {
    pub gate: Param<T>,
    pub up: Param<T>,
    pub down: Param<T>,
}

/// Pre-norm decoder block: `r = x + attn(norm(x))`, `m = mlp(norm(r))`.
/// The caller decides how `m` is combined with the residual `r`.
#[derive(Clone, Debug)]
pub struct DecoderLayer<T: Real = f32> {
    pub attn_norm: Param<T>,
    pub attn: Attention<T>,
    pub mlp_norm: Param<T>,
    pub mlp: Mlp<T>,
}

pub(crate) struct LayerOut<'t, T: Real> {
    pub residual: Var<'t, T>,
    pub mlp: Var<'t, T>,
}

impl<T: Real> DecoderLayer<T> {
    pub(crate) fn init(
        prefix: &str,
        hidden: usize,
        inter: usize,
        mlp_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let p = |n: &str| format!("{prefix}.{n}");
        Self {
            attn_norm: ones_param(&p("attn_norm"), hidden),
            attn: Attention {
                wq: normal_param(&p("attn.wq"), &[hidden, hidden], INIT_STD, rng),
                wk: normal_param(&p("attn.wk"), &[hidden, hidden], INIT_STD, rng),
                wv: normal_param(&p("attn.wv"), &[hidden, hidden], INIT_STD, rng),
                wo: normal_param(&p("attn.wo"), &[hidden, hidden], INIT_STD, rng),
            },
            mlp_norm: ones_param(&p("mlp_norm"), hidden),
            mlp: Mlp {
                gate: normal_param(&p("mlp.gate"), &[hidden, inter], INIT_STD, rng),
                up: normal_param(&p("mlp.up"), &[hidden, inter], INIT_STD, rng),
                down: normal_param(&p("mlp.down"), &[inter, mlp_out], INIT_STD, rng),
            },
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.attn_norm,
            &self.attn.wq,
            &self.attn.wk,
            &self.attn.wv,
            &self.attn.wo,
            &self.mlp_norm,
            &self.mlp.gate,
            &self.mlp.up,
            &self.mlp.down,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.attn_norm,
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.attn.wv,
            &mut self.attn.wo,
            &mut self.mlp_norm,
            &mut self.mlp.gate,
            &mut self.mlp.up,
            &mut self.mlp.down,
        ]
    }

    pub(crate) fn cast<U: Real>(&self) -> DecoderLayer<U> {
        DecoderLayer {
            attn_norm: self.attn_norm.cast(),
            attn: Attention {
                wq: self.attn.wq.cast(),
                wk: self.attn.wk.cast(),
                wv: self.attn.wv.cast(),
                wo: self.attn.wo.cast(),
            },
            mlp_norm: self.mlp_norm.cast(),
            mlp: Mlp {
                gate: self.mlp.gate.cast(),
                up: self.mlp.up.cast(),
                down: self.mlp.down.cast(),
            },
        }
    }

    /// `x: [batch, seq, hidden]`. With a cache, batch must be 1 and the new
    /// keys/values are appended after attention.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        positions: &[usize],
        mask: &AttnMask,
        cache: Option<&mut LayerKv<T>>,
        n_heads: usize,
        rope_base: f64,
    ) -> Result<LayerOut<'t, T>> {
        let shape = x.shape();
        let (bs, seq, hidden) = (shape[0], shape[1], shape[2]);
        let h = x.rms_norm(tape.param(&self.attn_norm), NORM_EPS)?;
        let q = h.matmul(tape.param(&self.attn.wq))?.rope(positions, n_heads, rope_base)?;
        let k = h.matmul(tape.param(&self.attn.wk))?.rope(positions, n_heads, rope_base)?;
        let v = h.matmul(tape.param(&self.attn.wv))?;
        let a = match cache {
            None => Var::attention(q, k, v, mask, n_heads)?,
            Some(kv) => {
                if bs != 1 {
                    return Err(Error::contract("cached attention requires batch size 1"));
                }
                let past = kv.k.len() / hidden;
                let (k_all, v_all) = if past == 0 {
                    (k, v)
                } else {
                    let pk = tape.constant(Tensor::new(vec![1, past, hidden], kv.k.clone())?);
                    let pv = tape.constant(Tensor::new(vec![1, past, hidden], kv.v.clone())?);
                    (Var::concat(&[pk, k], 1)?, Var::concat(&[pv, v], 1)?)
                };
                let a = Var::attention(q, k_all, v_all, mask, n_heads)?;
                kv.k.extend_from_slice(k.value().data());
                kv.v.extend_from_slice(v.value().data());
                debug_assert_eq!(kv.k.len(), (past + seq) * hidden);
                a
            }
        };
        let residual = x.add(a.matmul(tape.param(&self.attn.wo))?)?;
        let hn = residual.rms_norm(tape.param(&self.mlp_norm), NORM_EPS)?;
        let gate = hn.matmul(tape.param(&self.mlp.gate))?.silu();
        let up = hn.matmul(tape.param(&self.mlp.up))?;
        let mlp = gate.mul(up)?.matmul(tape.param(&self.mlp.down))?;
        Ok(LayerOut { residual, mlp })
    }
}

impl<T: Real> KvCache<T> {
    #[cfg(test)]
    pub(crate) fn push_row_for_test(&mut self, v: T) {
        let w = self.width;
        for l in &mut self.layers {
            l.k.extend(std::iter::repeat_n(v, w));
            l.v.extend(std::iter::repeat_n(v, w));
        }
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerKv<T> {
        &mut self.layers[i]
    }
}
