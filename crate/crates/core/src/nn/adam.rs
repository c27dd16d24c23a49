use serde::{Deserialize, Serialize};

use super::resnet::SResNet;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.9,
            weight_decay: 2e-4,
        }
    }
}

/// Moment estimates for every parameter, in the network's declaration
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, net: &mut SResNet<T>) -> Self {
        let mut m = Vec::new();
        net.visit_params(&mut |p| m.push(vec![T::zero(); p.len()]));
        let v = m.clone();
        Self {
            config,
            m,
            v,
            step: 0,
            lr: config.lr,
        }
    }

    /// Applies one update from the gradients stored in the network.
    pub fn update(&mut self, net: &mut SResNet<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let corr1 = 1.0 - c.beta1.powi(t);
        let corr2 = 1.0 - c.beta2.powi(t);
        let step_size = T::from_f64(self.lr * corr2.sqrt() / corr1);
        let eps_hat = T::from_f64(c.eps * corr2.sqrt());
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |p| {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for ((w, &g), (mk, vk)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
                *mk = b1 * *mk + one_b1 * g;
                *vk = b2 * *vk + one_b2 * g * g;
                *w = *w - step_size * *mk / (vk.sqrt() + eps_hat);
            }
            i += 1;
        });
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.config.lr_decay;
    }
}
