//! Adam optimizer with bias correction.

use crate::nncore::param::{ParamId, ParameterStore};
use crate::nncore::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer over one parameter store. States are allocated lazily per
/// parameter; frozen parameters are left bit-identical.
#[derive(Debug)]
pub struct Adam<T> {
    hp: AdamParams,
    states: Vec<Option<AdamState<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hp: AdamParams) -> Self {
        Adam {
            hp,
            states: Vec::new(),
        }
    }

    /// One update over every trainable parameter, in id order, at the given
    /// learning rate.
    pub fn step(&mut self, store: &mut ParameterStore<T>, lr: f64) {
        if self.states.len() < store.len() {
            self.states.resize_with(store.len(), || None);
        }
        let b1 = T::from_f64(self.hp.beta1);
        let b2 = T::from_f64(self.hp.beta2);
        let eps = T::from_f64(self.hp.eps);
        let lr_t = T::from_f64(lr);
        let one = T::one();

        for idx in 0..store.len() {
            let id = ParamId(idx);
            if !store.is_trainable(id) {
                continue;
            }
            let state = self.states[idx].get_or_insert_with(|| AdamState {
                step: 0,
                m: Tensor::zeros(store.value(id).shape().to_vec()),
                v: Tensor::zeros(store.value(id).shape().to_vec()),
                lr: lr_t,
                beta1: b1,
                beta2: b2,
                eps,
            });
            state.step += 1;
            state.lr = lr_t;
            let t = state.step as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);

            let grad = store.grad(id).data().to_vec();
            let m = state.m.data_mut();
            let v = state.v.data_mut();
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] = value[i] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::tensor::Tensor;

    #[test]
    fn zero_grad_no_move() {
        let mut s = ParameterStore::<f64>::new();
        let id = s.insert("w", Tensor::new(vec![1], vec![0.7]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamParams::default());
        opt.step(&mut s, 0.1);
        assert_eq!(s.value(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // grad = 1, lr = 0.1: bias-corrected first step is lr / (1 + eps) ~ 0.1.
        let mut s = ParameterStore::<f64>::new();
        let id = s.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        s.add_grad(id, &[1.0]);
        let mut opt = Adam::new(AdamParams::default());
        opt.step(&mut s, 0.1);
        let moved = 1.0 - s.value(id).data()[0];
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn frozen_param_bit_identical() {
        let mut s = ParameterStore::<f32>::new();
        let id = s.insert("w", Tensor::new(vec![1], vec![0.25]).unwrap()).unwrap();
        s.set_trainable(id, false);
        s.add_grad(id, &[5.0]);
        let mut opt = Adam::new(AdamParams::default());
        for _ in 0..10 {
            opt.step(&mut s, 0.5);
        }
        assert_eq!(s.value(id).data()[0].to_bits(), 0.25f32.to_bits());
    }

    #[test]
    fn quadratic_loss_descends() {
        // Minimize (w - 3)^2 for 100 steps; loss should drop monotonically
        // after a short warm-up.
        let mut s = ParameterStore::<f64>::new();
        let id = s.insert("w", Tensor::new(vec![1], vec![-2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamParams::default());
        let mut losses = Vec::new();
        for _ in 0..100 {
            let w = s.value(id).data()[0];
            losses.push((w - 3.0) * (w - 3.0));
            s.zero_grads();
            s.add_grad(id, &[2.0 * (w - 3.0)]);
            opt.step(&mut s, 0.05);
        }
        for w in losses.windows(2).skip(5) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(losses[99] < 0.1 * losses[0]);
    }
}
