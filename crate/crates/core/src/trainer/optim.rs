use crate::model::ModelParams;
use crate::numerics::Element;

use super::{OptimizerKind, TrainConfig};

/// Hyperparameters of one update rule, read from a [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Hyper {
    pub fn from_config(c: &TrainConfig) -> Self {
        Hyper { kind: c.optimizer, weight_decay: c.weight_decay, beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps, momentum: c.momentum }
    }
}

/// Whether decoupled weight decay applies to a tensor: projection weights
/// and conv kernels only, never biases, norms, positions, or the class token.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with(".kernel")
}

/// AdamW (decoupled decay) on one buffer at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, decay: f64, h: &Hyper) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        p[i] -= lr * decay * p[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * mhat / (vhat.sqrt() + h.eps);
    }
}

/// Heavy-ball SGD: `buf = μ·buf + g`, `p -= lr·buf`.
pub fn sgd_momentum_update(p: &mut [f64], g: &[f64], buf: &mut [f64], lr: f64, momentum: f64) {
    for i in 0..p.len() {
        buf[i] = momentum * buf[i] + g[i];
        p[i] -= lr * buf[i];
    }
}

/// Per-tensor optimizer moments, aligned with parameter declaration order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    hyper: Hyper,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl Optimizer {
    pub fn new<T: Element>(hyper: Hyper, params: &ModelParams<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Optimizer { hyper, step: 0, first: zeros(), second: zeros(), decay: params.iter().map(|(n, _)| decays(n)).collect() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update with gradients `grads` (declaration order).
    pub fn step<T: Element>(&mut self, params: &mut ModelParams<T>, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let h = self.hyper;
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let mut p: Vec<f64> = tensor.data().iter().map(|v| v.as_f64()).collect();
            match h.kind {
                OptimizerKind::Adamw => {
                    let wd = if self.decay[i] { h.weight_decay } else { 0.0 };
                    adamw_update(&mut p, &grads[i], &mut self.first[i], &mut self.second[i], self.step, lr, wd, &h);
                }
                OptimizerKind::SgdMomentum => {
                    sgd_momentum_update(&mut p, &grads[i], &mut self.first[i], lr, h.momentum);
                }
            }
            for (dst, src) in tensor.data_mut().iter_mut().zip(p) {
                *dst = T::from_f64(src);
            }
        }
    }
}
