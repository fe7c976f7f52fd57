//! Adam with decoupled L2 weight decay.

use super::params::{Grads, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient `λ` of the penalty `λ‖θ‖²`; applied as `θ -= lr · 2λ · θ`.
    pub l2: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, l2: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let param = store.get_mut(id);
            let decay = 1.0 - self.lr * 2.0 * self.l2;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            match grads.get(id) {
                Some(g) => {
                    for k in 0..param.len() {
                        let gk = g.data()[k];
                        let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                        let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                        m.data_mut()[k] = mk;
                        v.data_mut()[k] = vk;
                        let p = &mut param.data_mut()[k];
                        *p = *p * decay - self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                    }
                }
                None => {
                    for k in 0..param.len() {
                        let mk = self.beta1 * m.data()[k];
                        let vk = self.beta2 * v.data()[k];
                        m.data_mut()[k] = mk;
                        v.data_mut()[k] = vk;
                        let p = &mut param.data_mut()[k];
                        *p = *p * decay - self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
