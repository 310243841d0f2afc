use serde::{Deserialize, Serialize};

use crate::float::Float;
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients so their global L2 norm is at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr` (the schedule lives with the caller).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = grads.global_norm_sq().sqrt();
                if norm > max && norm > 0.0 {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let f = T::from_f64_lossy;
        let (b1, b2, eps, wd) = (f(c.beta1), f(c.beta2), f(c.eps), f(c.weight_decay));
        let step_size = f(lr / bc1);
        let bc2_sqrt = f(bc2.sqrt());
        let clip = f(clip);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = params.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i] * clip;
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (T::one() - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let update = step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
                w[i] -= update + f(lr) * wd * w[i];
            }
        }
    }
}

/// Linear decay from `base` at step 0 to zero at `total` steps.
pub fn linear_decay(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(vec![1, 2], vec![3.0, -2.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            clip_norm: None,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(w);
                let sq = g.mul(p, p).unwrap();
                let loss = g.sum(sq);
                g.backward(loss).unwrap()
            };
            opt.step(&mut store, &grads, 0.1);
        }
        assert!(store.get(w).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn decay_reaches_zero() {
        assert_eq!(linear_decay(1.0, 0, 10), 1.0);
        assert!((linear_decay(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(linear_decay(1.0, 10, 10), 0.0);
        assert_eq!(linear_decay(1.0, 20, 10), 0.0);
    }
}
