//! Adam with decoupled weight decay.

use alloc::vec::Vec;

use crate::params::{Gradients, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02, clip_norm: None }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        self.step_with_lr(params, grads, self.cfg.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> f64 {
        let n = params.len();
        if self.m.len() < n {
            self.m.resize_with(n, || None);
            self.v.resize_with(n, || None);
        }
        self.step += 1;
        let norm = grads.global_norm().f64();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c && norm > 0.0 => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - libm::pow(b1, self.step as f64);
        let bc2 = 1.0 - libm::pow(b2, self.step as f64);
        let (tb1, tb2) = (T::c(b1), T::c(b2));
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(self.cfg.eps);
        let clip = T::c(clip);
        for (id, g) in grads.iter() {
            let i = id.index();
            let entry = &mut params.entries_mut()[i];
            let decay = entry.decay;
            let p = entry.value.data_mut();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            if decay && self.cfg.weight_decay > 0.0 {
                let f = T::c(1.0 - lr * self.cfg.weight_decay);
                p.iter_mut().for_each(|x| *x *= f);
            }
            for (((x, gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gc = *gi * clip;
                *mi = tb1 * *mi + (T::one() - tb1) * gc;
                *vi = tb2 * *vi + (T::one() - tb2) * gc * gc;
                *x -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
