use std::collections::HashMap;

use super::{Param, Real};

/// AdamW with decoupled weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Parameters without
    /// a gradient are treated as having a zero gradient.
    pub fn step<'p, T: Real>(&mut self, params: impl IntoIterator<Item = &'p mut Param<T>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in params {
            if !p.requires_grad {
                continue;
            }
            let n = p.data().len();
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad: Vec<f64> = match &p.grad {
                Some(g) => g.data().iter().map(|x| x.f64()).collect(),
                None => vec![0.0; n],
            };
            let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mut x = w.f64();
                if wd != 0.0 {
                    x -= lr * wd * x;
                }
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                x -= lr * upd;
                *w = T::of(x);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<'p, T: Real>(
    params: impl IntoIterator<Item = &'p mut Param<T>>,
    max_norm: f64,
) -> f64 {
    let mut ps: Vec<&mut Param<T>> = params.into_iter().collect();
    let mut sq = 0f64;
    for p in ps.iter() {
        if let Some(g) = &p.grad {
            sq += g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::of(max_norm / norm);
        for p in ps.iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v = *v * k;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(vals: &[f32]) -> Param<f32> {
        Param::new("w", Tensor::new([vals.len()], vals.to_vec()).unwrap())
    }

    #[test]
    fn zero_grad_without_decay_leaves_params_unchanged() {
        let mut p = param(&[0.5, -1.25, 3.0]);
        p.grad = Some(Tensor::zeros([3]));
        let before = p.data().to_vec();
        let mut opt = AdamW::new(1e-2, (0.9, 0.95), 0.0);
        for _ in 0..5 {
            opt.step([&mut p]);
        }
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn zero_grad_with_decay_only_shrinks() {
        let mut p = param(&[2.0, -4.0]);
        let mut opt = AdamW::new(0.1, (0.9, 0.95), 0.5);
        opt.step([&mut p]);
        assert!((p.data()[0] - 1.9).abs() < 1e-6);
        assert!((p.data()[1] + 3.8).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = param(&[1.0, 1.0]);
        p.grad = Some(Tensor::new([2], vec![3.0, -0.1]).unwrap());
        let mut opt = AdamW::new(0.01, (0.9, 0.95), 0.0);
        opt.step([&mut p]);
        assert!((p.data()[0] - 0.99).abs() < 1e-5);
        assert!((p.data()[1] - 1.01).abs() < 1e-5);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = param(&[3.0]);
        let mut b = param(&[4.0]);
        a.grad = Some(Tensor::new([1], vec![3.0]).unwrap());
        b.grad = Some(Tensor::new([1], vec![4.0]).unwrap());
        let n = clip_grad_norm([&mut a, &mut b], 0.5);
        assert!((n - 5.0).abs() < 1e-9);
        let g = (a.grad.unwrap().data()[0], b.grad.unwrap().data()[0]);
        assert!(((g.0 * g.0 + g.1 * g.1).sqrt() - 0.5).abs() < 1e-6);
    }
}
