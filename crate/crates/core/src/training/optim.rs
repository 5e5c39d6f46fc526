use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with weight decay applied outside the moment update (or folded into
/// the gradient when `coupled`).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub coupled: bool,
    pub t: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub coupled: bool,
}

impl Adam {
    pub fn new(store: &ParamStore, h: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            coupled: h.coupled,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            coupled: self.coupled,
        }
    }

    /// One update. `grads[i]` belongs to parameter `i`; parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(grad) = &grads[i] else { continue };
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let mut gj = grad.data()[j];
                if self.coupled {
                    gj += self.weight_decay * p[j];
                }
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut update = mhat / (vhat.sqrt() + self.eps);
                if !self.coupled {
                    update += self.weight_decay * p[j];
                }
                p[j] -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            coupled: false,
        }
    }

    #[test]
    fn scalar_matches_textbook_moments() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, hyper(0.0));
        let (mut m, mut v, mut p) = (0.0, 0.0, 1.0f64);
        for (t, g) in [0.5, -0.2, 0.3].into_iter().enumerate() {
            adam.step(&mut store, &[Some(Tensor::scalar(g))], 0.1);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(id).item() - p).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut store = ParamStore::new();
        store.register("p", Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.7));
        let before = store.clone();
        let mut adam = Adam::new(&store, hyper(1e-5));
        adam.step(&mut store, &[Some(Tensor::full(&[5], 2.0))], 0.0);
        assert_eq!(store.iter().next().unwrap().2, before.iter().next().unwrap().2);
    }
}
