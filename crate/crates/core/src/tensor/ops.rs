use std::rc::Rc;

use super::kernels::{dot, gemm, gemm_tn, logsumexp, softmax_row, transpose};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Which keys each query row may attend to.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Query `i` sees keys `0..=offset + i`; requires `keys == offset + queries`.
    Causal { offset: usize },
    /// Row-major `[queries, keys]` allow matrix.
    Explicit {
        rows: usize,
        cols: usize,
        allow: Rc<Vec<bool>>,
    },
}

impl AttnMask {
    pub fn explicit(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != rows * cols {
            return Err(Error::Shape {
                op: "attn_mask",
                lhs: vec![rows, cols],
                rhs: vec![allow.len()],
            });
        }
        Ok(Self::Explicit {
            rows,
            cols,
            allow: Rc::new(allow),
        })
    }

    fn allowed_keys(&self, i: usize, tk: usize) -> Vec<usize> {
        match self {
            AttnMask::Causal { offset } => (0..=(offset + i).min(tk - 1)).collect(),
            AttnMask::Explicit { cols, allow, .. } => {
                let row = &allow[i * cols..(i + 1) * cols];
                (0..tk).filter(|&j| row[j]).collect()
            }
        }
    }

    fn check(&self, tq: usize, tk: usize) -> Result<()> {
        match self {
            AttnMask::Causal { offset } if offset + tq == tk => Ok(()),
            AttnMask::Explicit { rows, cols, allow } if *rows == tq && *cols == tk => {
                for i in 0..tq {
                    if !allow[i * cols..(i + 1) * cols].iter().any(|&a| a) {
                        return Err(Error::contract(format!(
                            "attention mask row {i} allows no keys"
                        )));
                    }
                }
                Ok(())
            }
            AttnMask::Causal { offset } => Err(Error::contract(format!(
                "causal mask offset {offset} inconsistent with {tq} queries over {tk} keys"
            ))),
            AttnMask::Explicit { rows, cols, .. } => Err(Error::Shape {
                op: "attention mask",
                lhs: vec![*rows, *cols],
                rhs: vec![tq, tk],
            }),
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

/// `(outer, size, inner)` strides for a given axis.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn huber_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(
        self,
        other: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>, Tensor<T>)> {
        let a = self.value();
        let b = other.value();
        a.check_same_shape(&b, op)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok((a, b, out))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, _, out) = self.binary(other, "add", |x, y| x + y)?;
        Ok(self
            .tape
            .record(out, &[self.id, other.id], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, _, out) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.tape.record(out, &[self.id, other.id], |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b, out) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.tape.record(out, &[self.id, other.id], move |g| {
            let ga = g.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
            let gb = g.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
            vec![
                Some(Tensor::new(g.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(g.shape().to_vec(), gb).unwrap()),
            ]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let k = T::of(c);
        let out = self.value().map(|v| v * k);
        self.tape.record(out, &[self.id], move |g| vec![Some(g.map(|v| v * k))])
    }

    /// Adds a `[last_dim]` vector to every row.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let b = bias.value();
        let w = x.last_dim();
        if b.shape() != [w] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(w) {
            add_into(row, b.data());
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(out, &[self.id, bias.id], move |g| {
            let mut acc = vec![0f64; w];
            for row in g.data().chunks(w) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.f64();
                }
            }
            let gb = Tensor::new(vec![w], acc.into_iter().map(T::of).collect()).unwrap();
            vec![Some(g.clone()), Some(gb)]
        }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let s: f64 = x.data().iter().map(|v| v.f64()).sum();
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::scalar(T::of(s)), &[self.id], move |g| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x.reshape(shape)?;
        Ok(self
            .tape
            .record(out, &[self.id], move |g| vec![Some(g.reshape(old.clone()).unwrap())]))
    }

    /// `[..., m, k] x [k, n]`, or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.rank() < 2 {
            return Err(mismatch());
        }
        let k = a.last_dim();
        match b.rank() {
            2 => {
                if b.shape()[0] != k {
                    return Err(mismatch());
                }
                let n = b.shape()[1];
                let m = a.rows();
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                let out = Tensor::new(shape, gemm(a.data(), b.data(), m, k, n))?;
                let (na, nb) = (self.requires_grad(), other.requires_grad());
                Ok(self.tape.record(out, &[self.id, other.id], move |g| {
                    let ga = na.then(|| {
                        let bt = transpose(b.data(), k, n);
                        Tensor::new(a.shape().to_vec(), gemm(g.data(), &bt, m, n, k)).unwrap()
                    });
                    let gb = nb.then(|| {
                        Tensor::new(vec![k, n], gemm_tn(a.data(), g.data(), m, k, n)).unwrap()
                    });
                    vec![ga, gb]
                }))
            }
            3 => {
                if a.rank() != 3 || a.shape()[0] != b.shape()[0] || b.shape()[1] != k {
                    return Err(mismatch());
                }
                let (bs, m, n) = (a.shape()[0], a.shape()[1], b.shape()[2]);
                let mut out = Vec::with_capacity(bs * m * n);
                for i in 0..bs {
                    out.extend(gemm(
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    ));
                }
                let out = Tensor::new(vec![bs, m, n], out)?;
                Ok(self.tape.record(out, &[self.id, other.id], move |g| {
                    let mut ga = Vec::with_capacity(bs * m * k);
                    let mut gb = Vec::with_capacity(bs * k * n);
                    for i in 0..bs {
                        let ai = &a.data()[i * m * k..(i + 1) * m * k];
                        let bi = &b.data()[i * k * n..(i + 1) * k * n];
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        ga.extend(gemm(gi, &transpose(bi, k, n), m, n, k));
                        gb.extend(gemm_tn(ai, gi, m, k, n));
                    }
                    vec![
                        Some(Tensor::new(vec![bs, m, k], ga).unwrap()),
                        Some(Tensor::new(vec![bs, k, n], gb).unwrap()),
                    ]
                }))
            }
            _ => Err(mismatch()),
        }
    }

    pub fn silu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| {
            let v = v.f64();
            T::of(v / (1.0 + (-v).exp()))
        });
        self.tape.record(out, &[self.id], move |g| {
            let d = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| {
                    let v = v.f64();
                    let s = 1.0 / (1.0 + (-v).exp());
                    T::of(g.f64() * s * (1.0 + v * (1.0 - s)))
                })
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), d).unwrap())]
        })
    }

    /// `x / rms(x) * weight` over the last axis.
    pub fn rms_norm(self, weight: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let n = x.last_dim();
        if w.shape() != [n] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let inv: Vec<f64> = x
            .data()
            .chunks(n)
            .map(|row| 1.0 / (dot(row, row) / n as f64 + eps).sqrt())
            .collect();
        let mut out = Vec::with_capacity(x.numel());
        for (row, &r) in x.data().chunks(n).zip(&inv) {
            for (&v, &wv) in row.iter().zip(w.data()) {
                out.push(T::of(v.f64() * r * wv.f64()));
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(out, &[self.id, weight.id], move |g| {
            let mut gx = Vec::with_capacity(x.numel());
            let mut gw = vec![0f64; n];
            for ((row, grow), &r) in x.data().chunks(n).zip(g.data().chunks(n)).zip(&inv) {
                let mut s = 0f64;
                for ((&v, &gv), &wv) in row.iter().zip(grow).zip(w.data()) {
                    s += gv.f64() * wv.f64() * v.f64();
                }
                let c = r * r * r * s / n as f64;
                for (((&v, &gv), &wv), gwv) in
                    row.iter().zip(grow).zip(w.data()).zip(gw.iter_mut())
                {
                    gx.push(T::of(r * gv.f64() * wv.f64() - v.f64() * c));
                    *gwv += gv.f64() * v.f64() * r;
                }
            }
            vec![
                Some(Tensor::new(x.shape().to_vec(), gx).unwrap()),
                Some(Tensor::new(vec![n], gw.into_iter().map(T::of).collect()).unwrap()),
            ]
        }))
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Numeric { op: "softmax" });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut y = vec![T::zero(); x.numel()];
        let mut src = vec![T::zero(); n];
        let mut dst = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    src[j] = x.data()[(o * n + j) * inner + i];
                }
                softmax_row(&src, &mut dst);
                for j in 0..n {
                    y[(o * n + j) * inner + i] = dst[j];
                }
            }
        }
        let y = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        let yc = y.clone();
        Ok(self.tape.record((*y).clone(), &[self.id], move |g| {
            let mut gx = vec![T::zero(); yc.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let s: f64 = (0..n)
                        .map(|j| g.data()[idx(j)].f64() * yc.data()[idx(j)].f64())
                        .sum();
                    for j in 0..n {
                        let yj = yc.data()[idx(j)].f64();
                        gx[idx(j)] = T::of(yj * (g.data()[idx(j)].f64() - s));
                    }
                }
            }
            vec![Some(Tensor::new(yc.shape().to_vec(), gx).unwrap())]
        }))
    }

    /// Row lookup into a `[vocab, width]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t, T>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(Error::contract("embedding table must be rank 2"));
        }
        let (v, w) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(table.row(id));
        }
        let out = Tensor::new(vec![ids.len(), w], out)?;
        let ids = ids.to_vec();
        Ok(self.tape.record(out, &[self.id], move |g| {
            let mut gt = vec![T::zero(); v * w];
            for (r, &id) in ids.iter().enumerate() {
                add_into(&mut gt[id * w..(id + 1) * w], g.row(r));
            }
            vec![Some(Tensor::new(vec![v, w], gt).unwrap())]
        }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        for v in &vals[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &n) in vals.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.record(out, &ids, move |g| {
            let mut grads: Vec<Vec<T>> =
                shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &n) in grads.iter_mut().zip(&sizes) {
                    gv.extend_from_slice(&g.data()[off..off + n * inner]);
                    off += n * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::new(s.clone(), d).unwrap()))
                .collect()
        }))
    }

    /// Splits along `axis` into consecutive chunks of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
        let x = self.value();
        if axis >= x.rank() || sizes.iter().sum::<usize>() != x.shape()[axis] {
            return Err(Error::Shape {
                op: "split",
                lhs: x.shape().to_vec(),
                rhs: sizes.to_vec(),
            });
        }
        let (outer, total, inner) = axis_split(x.shape(), axis);
        let mut start = 0;
        let mut outs = Vec::with_capacity(sizes.len());
        for &n in sizes {
            let mut d = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                d.extend_from_slice(&x.data()[base..base + n * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = n;
            let out = Tensor::new(shape, d)?;
            let full = x.shape().to_vec();
            let s0 = start;
            outs.push(self.tape.record(out, &[self.id], move |g| {
                let mut gx = vec![T::zero(); full.iter().product()];
                for o in 0..outer {
                    let base = (o * total + s0) * inner;
                    gx[base..base + n * inner]
                        .copy_from_slice(&g.data()[o * n * inner..(o + 1) * n * inner]);
                }
                vec![Some(Tensor::new(full.clone(), gx).unwrap())]
            }));
            start += n;
        }
        Ok(outs)
    }

    /// Rotary position embedding on `[batch, seq, heads * head_dim]` using
    /// rotate-half pairing within each head. `positions` has one entry per
    /// sequence index, shared across the batch.
    pub fn rope(self, positions: &[usize], n_heads: usize, base: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 3 || x.shape()[1] != positions.len() || x.shape()[2] % n_heads != 0 {
            return Err(Error::Shape {
                op: "rope",
                lhs: x.shape().to_vec(),
                rhs: vec![positions.len(), n_heads],
            });
        }
        let (bs, seq, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hd = width / n_heads;
        if hd % 2 != 0 {
            return Err(Error::contract("rope needs an even head dimension"));
        }
        let half = hd / 2;
        let mut table = Vec::with_capacity(seq * half);
        for &p in positions {
            for d in 0..half {
                let theta = p as f64 * base.powf(-2.0 * d as f64 / hd as f64);
                table.push((theta.cos(), theta.sin()));
            }
        }
        let rotate = move |src: &[T], inverse: bool| -> Vec<T> {
            let mut out = vec![T::zero(); src.len()];
            for b in 0..bs {
                for t in 0..seq {
                    let row = (b * seq + t) * width;
                    for h in 0..n_heads {
                        let o = row + h * hd;
                        for d in 0..half {
                            let (c, mut s) = table[t * half + d];
                            if inverse {
                                s = -s;
                            }
                            let x1 = src[o + d].f64();
                            let x2 = src[o + d + half].f64();
                            out[o + d] = T::of(x1 * c - x2 * s);
                            out[o + d + half] = T::of(x1 * s + x2 * c);
                        }
                    }
                }
            }
            out
        };
        let shape = x.shape().to_vec();
        let out = Tensor::new(shape.clone(), rotate(x.data(), false))?;
        Ok(self.tape.record(out, &[self.id], move |g| {
            vec![Some(Tensor::new(shape.clone(), rotate(g.data(), true)).unwrap())]
        }))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [b, tq, h*d]`, `k, v: [b, tk, h*d]`. Each `(row, head)` is computed
    /// independently with keys visited in index order.
    pub fn attention(
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        mask: &AttnMask,
        n_heads: usize,
    ) -> Result<Var<'t, T>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let bad = || Error::Shape {
            op: "attention",
            lhs: qv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        };
        if qv.rank() != 3 || kv.shape() != vv.shape() || kv.rank() != 3 {
            return Err(bad());
        }
        let (bs, tq, width) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let tk = kv.shape()[1];
        if kv.shape()[0] != bs || kv.shape()[2] != width || width % n_heads != 0 || tk == 0 {
            return Err(bad());
        }
        mask.check(tq, tk)?;
        let hd = width / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let keys: Vec<Vec<usize>> = (0..tq).map(|i| mask.allowed_keys(i, tk)).collect();

        // probs[b][h][i] holds one weight per allowed key of row i.
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(bs * n_heads * tq);
        let mut out = vec![T::zero(); bs * tq * width];
        let mut acc = vec![0f64; hd];
        for b in 0..bs {
            for h in 0..n_heads {
                for (i, ks) in keys.iter().enumerate() {
                    let qo = (b * tq + i) * width + h * hd;
                    let qrow = &qv.data()[qo..qo + hd];
                    let mut s: Vec<f64> = ks
                        .iter()
                        .map(|&j| {
                            let ko = (b * tk + j) * width + h * hd;
                            dot(qrow, &kv.data()[ko..ko + hd]) * scale
                        })
                        .collect();
                    let max = s.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let mut sum = 0f64;
                    for x in s.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    acc.fill(0.0);
                    for (x, &j) in s.iter_mut().zip(ks) {
                        *x /= sum;
                        let vo = (b * tk + j) * width + h * hd;
                        for (a, &vv) in acc.iter_mut().zip(&vv.data()[vo..vo + hd]) {
                            *a += *x * vv.f64();
                        }
                    }
                    for (o, &a) in out[qo..qo + hd].iter_mut().zip(&acc) {
                        *o = T::of(a);
                    }
                    probs.push(s);
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: "attention" });
        }
        let out = Tensor::new(vec![bs, tq, width], out)?;
        let need = [q.requires_grad(), k.requires_grad(), v.requires_grad()];
        Ok(q.tape.record(out, &[q.id, k.id, v.id], move |g| {
            let mut gq = vec![0f64; bs * tq * width];
            let mut gk = vec![0f64; bs * tk * width];
            let mut gv = vec![0f64; bs * tk * width];
            let mut p_iter = probs.iter();
            for b in 0..bs {
                for h in 0..n_heads {
                    for (i, ks) in keys.iter().enumerate() {
                        let p = p_iter.next().unwrap();
                        let qo = (b * tq + i) * width + h * hd;
                        let grow = &g.data()[qo..qo + hd];
                        let dp: Vec<f64> = ks
                            .iter()
                            .map(|&j| {
                                let vo = (b * tk + j) * width + h * hd;
                                dot(grow, &vv.data()[vo..vo + hd])
                            })
                            .collect();
                        let pd: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for ((&j, &pj), &dpj) in ks.iter().zip(p).zip(&dp) {
                            let ds = pj * (dpj - pd) * scale;
                            let ko = (b * tk + j) * width + h * hd;
                            for d in 0..hd {
                                gq[qo + d] += ds * kv.data()[ko + d].f64();
                                gk[ko + d] += ds * qv.data()[qo + d].f64();
                                gv[ko + d] += pj * grow[d].f64();
                            }
                        }
                    }
                }
            }
            let mk = |d: Vec<f64>, s: &[usize], n: bool| {
                n.then(|| Tensor::new(s.to_vec(), d.into_iter().map(T::of).collect()).unwrap())
            };
            vec![
                mk(gq, qv.shape(), need[0]),
                mk(gk, kv.shape(), need[1]),
                mk(gv, vv.shape(), need[2]),
            ]
        }))
    }

    fn check_rows_mask(&self, mask: &[bool], op: &'static str) -> Result<Rc<Tensor<T>>> {
        let x = self.value();
        if x.rows() != mask.len() {
            return Err(Error::Shape {
                op,
                lhs: x.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        Ok(x)
    }

    fn zero_loss(self, op: &str) -> Var<'t, T> {
        self.tape.warn(format!("{op}: every position is masked out; loss is zero"));
        let shape = self.shape();
        self.tape.record(Tensor::scalar(T::zero()), &[self.id], move |_| {
            vec![Some(Tensor::zeros(shape.clone()))]
        })
    }

    /// Mean over masked-in rows of `-sum(p * log_softmax(self))`, where
    /// `self` holds logits and `targets` holds probabilities.
    pub fn cross_entropy(self, targets: &Tensor<T>, mask: &[bool]) -> Result<Var<'t, T>> {
        let z = self.check_rows_mask(mask, "cross_entropy")?;
        z.check_same_shape(targets, "cross_entropy")?;
        if !z.is_finite() {
            return Err(Error::Numeric { op: "cross_entropy" });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok(self.zero_loss("cross_entropy"));
        }
        let v = z.last_dim();
        let mut total = 0f64;
        for ((zr, pr), _) in z
            .data()
            .chunks(v)
            .zip(targets.data().chunks(v))
            .zip(mask)
            .filter(|(_, &m)| m)
        {
            let lse = logsumexp(zr);
            let psum: f64 = pr.iter().map(|p| p.f64()).sum();
            total += lse * psum - dot(pr, zr);
        }
        let loss = Tensor::scalar(T::of(total / count as f64));
        let targets = targets.clone();
        let mask = mask.to_vec();
        Ok(self.tape.record(loss, &[self.id], move |g| {
            let k = g.item().f64() / count as f64;
            let mut gz = vec![T::zero(); z.numel()];
            let mut sm = vec![T::zero(); v];
            for (r, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let zr = z.row(r);
                let pr = targets.row(r);
                softmax_row(zr, &mut sm);
                let psum: f64 = pr.iter().map(|p| p.f64()).sum();
                for c in 0..v {
                    gz[r * v + c] = T::of(k * (sm[c].f64() * psum - pr[c].f64()));
                }
            }
            vec![Some(Tensor::new(z.shape().to_vec(), gz).unwrap())]
        }))
    }

    /// Cross entropy against integer labels.
    pub fn cross_entropy_labels(self, labels: &[usize], mask: &[bool]) -> Result<Var<'t, T>> {
        let z = self.check_rows_mask(mask, "cross_entropy")?;
        if labels.len() != mask.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![labels.len()],
                rhs: vec![mask.len()],
            });
        }
        let v = z.last_dim();
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: v,
            });
        }
        if !z.is_finite() {
            return Err(Error::Numeric { op: "cross_entropy" });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok(self.zero_loss("cross_entropy"));
        }
        let mut total = 0f64;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                let zr = z.row(r);
                total += logsumexp(zr) - zr[labels[r]].f64();
            }
        }
        let loss = Tensor::scalar(T::of(total / count as f64));
        let labels = labels.to_vec();
        let mask = mask.to_vec();
        Ok(self.tape.record(loss, &[self.id], move |g| {
            let k = g.item().f64() / count as f64;
            let mut gz = vec![T::zero(); z.numel()];
            let mut sm = vec![T::zero(); v];
            for (r, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                softmax_row(z.row(r), &mut sm);
                for c in 0..v {
                    let y = if c == labels[r] { 1.0 } else { 0.0 };
                    gz[r * v + c] = T::of(k * (sm[c].f64() - y));
                }
            }
            vec![Some(Tensor::new(z.shape().to_vec(), gz).unwrap())]
        }))
    }

    /// Elementwise smooth-L1 (beta 1) mean over the elements of masked-in rows.
    pub fn smooth_l1(self, other: Var<'t, T>, mask: &[bool]) -> Result<Var<'t, T>> {
        let a = self.check_rows_mask(mask, "smooth_l1")?;
        let b = other.value();
        a.check_same_shape(&b, "smooth_l1")?;
        let w = a.last_dim();
        let count = mask.iter().filter(|&&m| m).count() * w;
        if count == 0 {
            let zero = self.zero_loss("smooth_l1");
            return Ok(zero);
        }
        let mut total = 0f64;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for (&x, &y) in a.row(r).iter().zip(b.row(r)) {
                    total += huber(x.f64() - y.f64());
                }
            }
        }
        let loss = Tensor::scalar(T::of(total / count as f64));
        let mask = mask.to_vec();
        Ok(self.tape.record(loss, &[self.id, other.id], move |g| {
            let k = g.item().f64() / count as f64;
            let mut ga = vec![T::zero(); a.numel()];
            for (r, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                for c in 0..w {
                    let d = a.data()[r * w + c].f64() - b.data()[r * w + c].f64();
                    ga[r * w + c] = T::of(k * huber_grad(d));
                }
            }
            let gb = ga.iter().map(|&v| -v).collect();
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga).unwrap()),
                Some(Tensor::new(a.shape().to_vec(), gb).unwrap()),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[2., 3., 4., 5.]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[2., 3., 4., 5.]);
    }

    #[test]
    fn row_times_column() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let y = tape.leaf(t(&[2], &[5., 6.]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn detached_value_never_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let d = x.detach();
        let loss = d.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 2.]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn smooth_l1_analytic_values() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[0.5; 4]));
        let z = tape.constant(Tensor::zeros([2, 2]));
        let l = a.smooth_l1(z, &[true, true]).unwrap();
        assert!((l.item() - 0.125).abs() < 1e-12);
        let a = tape.constant(t(&[2, 2], &[2.0; 4]));
        let l = a.smooth_l1(z, &[true, true]).unwrap();
        assert!((l.item() - 1.5).abs() < 1e-12);
        let l = a.smooth_l1(a, &[true, false]).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn smooth_l1_shape_mismatch() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 2]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(
            a.smooth_l1(b, &[true, true]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([1, 4]));
        let p = Tensor::full([1, 4], 0.25);
        let l = z.cross_entropy(&p, &[true]).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 3], &[0., 50., 0.]));
        let p = t(&[1, 3], &[0., 1., 0.]);
        assert!(z.cross_entropy(&p, &[true]).unwrap().item() < 1e-4);
    }

    #[test]
    fn cross_entropy_masked_rows_contribute_nothing() {
        let z = t(&[3, 3], &[0.3, -1.0, 2.0, 9.0, -9.0, 1.0, 0.1, 0.2, 0.3]);
        let p = t(&[3, 3], &[0.2, 0.5, 0.3, 1.0, 0.0, 0.0, 0.6, 0.3, 0.1]);
        let tape = Tape::<f64>::new();
        let loss = tape.constant(z.clone()).cross_entropy(&p, &[true, false, true]).unwrap();
        let per_row = |r: usize| {
            let zr = z.row(r);
            let lse = zr.iter().map(|v| v.exp()).sum::<f64>().ln();
            -(0..3).map(|c| p.row(r)[c] * (zr[c] - lse)).sum::<f64>()
        };
        let want = (per_row(0) + per_row(2)) / 2.0;
        assert!((loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_loss_is_zero_with_warning() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros([2, 3]));
        let l = z.cross_entropy(&Tensor::full([2, 3], 1.0 / 3.0), &[false, false]).unwrap();
        assert_eq!(l.item(), 0.0);
        assert_eq!(tape.warnings().len(), 1);
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_then_concat_is_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 5], &(0..10).map(|v| v as f64).collect::<Vec<_>>()));
        let parts = x.split(1, &[2, 3]).unwrap();
        assert_eq!(parts[0].value().data(), &[0., 1., 5., 6.]);
        let back = Var::concat(&parts, 1).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros([4, 2]));
        assert!(matches!(e.embedding(&[4]), Err(Error::Index { .. })));
    }

    #[test]
    fn embedding_grad_is_one_hot_row() {
        let tape = Tape::<f64>::new();
        let e = tape.leaf(t(&[5, 2], &(0..10).map(|v| v as f64).collect::<Vec<_>>()));
        let loss = e.embedding(&[3]).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let g = g.get(e).unwrap();
        for r in 0..5 {
            let want = if r == 3 { 1.0 } else { 0.0 };
            assert_eq!(g.row(r), &[want, want]);
        }
    }

    #[test]
    fn causal_attention_single_key_returns_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(t(&[1, 1, 2], &[0.3, 0.1]));
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let v = tape.constant(t(&[1, 1, 2], &[7.0, -3.0]));
        let o = Var::attention(q, k, v, &AttnMask::Causal { offset: 0 }, 1).unwrap();
        assert_eq!(o.value().data(), &[7.0, -3.0]);
    }
}
