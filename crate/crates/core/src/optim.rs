//! Adam with global-norm gradient clipping.

use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::real::{fmath, Real};

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| alloc::vec![F::zero(); p.value.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients in `store`.
    pub fn update(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - fmath::powf(self.beta1, t);
        let c2 = 1.0 - fmath::powf(self.beta2, t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let step_size = F::of(lr / c1);
        let inv_c2 = F::of(1.0 / c2);
        let eps = F::of(self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                value[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / |g|.
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::from_f64(&[2], &[0.5, -3.0]).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.98, 0.0);
        adam.update(&mut store, 0.1);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-12);
        assert!((v[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::zeros(&[2])).unwrap();
        store.get_mut(id).grad = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut store, 10.0), 1.0);
    }
}
