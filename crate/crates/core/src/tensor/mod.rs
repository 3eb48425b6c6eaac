//! Dense tensors with a dynamic reverse-mode tape.
//!
//! Storage is generic over [`Real`] so the same model code runs in `f32` for
//! training and inference and in `f64` for finite-difference checks. Every
//! reduction accumulates in `f64` and iterates in index order, which makes
//! results bit-reproducible and independent of how many rows are batched
//! together.

mod kernels;
mod ops;
mod optim;
mod tape;

pub use kernels::{gemm, softmax_row};
pub use ops::AttnMask;
pub use optim::{clip_grad_norm, AdamW};
pub use tape::{Gradients, Param, Tape, Var};

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Scalar storage type. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float + Default + Debug + std::fmt::Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.last_dim();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax_last(&self) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::Numeric { op: "softmax" });
        }
        let w = self.last_dim();
        let mut out = vec![T::zero(); self.data.len()];
        for (src, dst) in self.data.chunks(w).zip(out.chunks_mut(w)) {
            softmax_row(src, dst);
        }
        Self::new(self.shape.clone(), out)
    }

    /// Index of the maximum of each row; ties resolve to the smallest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.data
            .chunks(self.last_dim())
            .map(argmax)
            .collect()
    }

    pub(crate) fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Argmax with smallest-index tie-break. NaNs never win.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_is_enforced() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn argmax_prefers_smallest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let t = Tensor::<f32>::new([3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax_last().unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let t = Tensor::<f32>::new([2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax_last().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_f64_evaluation() {
        let t = Tensor::<f32>::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax_last().unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for i in 0..3 {
            let want = ((i + 1) as f64).exp() / z;
            assert!((s.data()[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::<f32>::new([2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax_last(), Err(Error::Numeric { .. })));
    }
}
