use super::Real;

/// Row-major `[m, k] x [k, n]`. Each output element is accumulated in `f64`
/// over `p = 0..k` in order, so a row's result never depends on `m`.
pub fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let b64: Vec<f64> = b.iter().map(|v| v.f64()).collect();
    let mut out = vec![T::zero(); m * n];
    let mut acc = vec![0f64; n];
    let mut arow = vec![0f64; k];
    for i in 0..m {
        acc.fill(0.0);
        for (d, s) in arow.iter_mut().zip(&a[i * k..(i + 1) * k]) {
            *d = s.f64();
        }
        axpy_rows(&mut acc, &arow, &b64, n);
        for (o, &c) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = T::of(c);
        }
    }
    out
}

/// `acc[j] += sum_p coef[p] * rows[p][j]`, adding terms strictly in `p`
/// order for every `j`.
#[inline]
fn axpy_rows(acc: &mut [f64], coef: &[f64], rows: &[f64], n: usize) {
    let mut p = 0;
    while p + 4 <= coef.len() {
        let (c0, c1, c2, c3) = (coef[p], coef[p + 1], coef[p + 2], coef[p + 3]);
        let r0 = &rows[p * n..(p + 1) * n];
        let r1 = &rows[(p + 1) * n..(p + 2) * n];
        let r2 = &rows[(p + 2) * n..(p + 3) * n];
        let r3 = &rows[(p + 3) * n..(p + 4) * n];
        for ((((x, &v0), &v1), &v2), &v3) in acc.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            let mut c = *x;
            c += c0 * v0;
            c += c1 * v1;
            c += c2 * v2;
            c += c3 * v3;
            *x = c;
        }
        p += 4;
    }
    while p < coef.len() {
        let c0 = coef[p];
        for (x, &v) in acc.iter_mut().zip(&rows[p * n..(p + 1) * n]) {
            *x += c0 * v;
        }
        p += 1;
    }
}

/// `[r, c] -> [c, r]`.
pub fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Gradient of `x @ w` with respect to `w` for row-major `x: [m, k]`,
/// `g: [m, n]`, i.e. `x^T g` of shape `[k, n]`.
pub fn gemm_tn<T: Real>(x: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let xt: Vec<f64> = transpose(x, m, k).iter().map(|v| v.f64()).collect();
    let g64: Vec<f64> = g.iter().map(|v| v.f64()).collect();
    let mut out = Vec::with_capacity(k * n);
    let mut acc = vec![0f64; n];
    for p in 0..k {
        acc.fill(0.0);
        axpy_rows(&mut acc, &xt[p * m..(p + 1) * m], &g64, n);
        out.extend(acc.iter().map(|&c| T::of(c)));
    }
    out
}

/// Numerically stable softmax of one row, computed in `f64`.
pub fn softmax_row<T: Real>(src: &[T], dst: &mut [T]) {
    let max = src
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
    let mut sum = 0f64;
    for &v in src {
        sum += (v.f64() - max).exp();
    }
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = T::of((v.f64() - max).exp() / sum);
    }
}

/// Stable log-sum-exp of a row.
pub fn logsumexp<T: Real>(src: &[T]) -> f64 {
    let max = src
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
    let mut sum = 0f64;
    for &v in src {
        sum += (v.f64() - max).exp();
    }
    max + sum.ln()
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut s = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        s += x.f64() * y.f64();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = gemm(&a, &b, 4, 5, 3);
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let want = naive(&a64, &b64, 4, 5, 3);
        for (g, w) in got.iter().zip(&want) {
            assert!(((*g as f64) - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn gemm_tn_is_transpose_product() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect(); // [3,2]
        let g: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // [3,4]
        let xt = transpose(&x, 3, 2);
        assert_eq!(gemm_tn(&x, &g, 3, 2, 4), gemm(&xt, &g, 2, 3, 4));
    }

    #[test]
    fn gemm_rows_are_independent_of_batch() {
        let a: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect();
        let b: Vec<f32> = (0..12).map(|v| (v as f32).cos()).collect();
        let all = gemm(&a, &b, 3, 4, 3);
        let last = gemm(&a[8..], &b, 1, 4, 3);
        assert_eq!(&all[6..], &last[..]);
    }
}
