//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::params::{GradSet, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Total steps of the cosine schedule; the last step lands on zero.
    pub total_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 2000,
        }
    }
}

/// Cosine annealing from the base rate down to exactly zero at the final step.
pub fn cosine_lr(cfg: &OptimizerConfig, step: usize) -> f64 {
    if cfg.total_steps <= 1 {
        return cfg.learning_rate;
    }
    let t = (step.min(cfg.total_steps - 1)) as f64 / (cfg.total_steps - 1) as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub struct AdamW {
    pub cfg: OptimizerConfig,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(&self.cfg, self.step)
    }

    /// One update. Returns the learning rate that was applied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradSet) -> f64 {
        let lr = self.current_lr();
        let t = (self.step + 1) as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (id, g) in grads.iter() {
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            let gd = g.data();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * gd[i];
                v[i] = b2 * v[i] + (1.0 - b2) * gd[i] * gd[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p[i]);
            }
        }
        self.step += 1;
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_starts_at_base_and_ends_at_zero() {
        let cfg = OptimizerConfig { total_steps: 100, ..Default::default() };
        assert_eq!(cosine_lr(&cfg, 0), cfg.learning_rate);
        assert!(cosine_lr(&cfg, 99).abs() < 1e-12);
        assert!(cosine_lr(&cfg, 50) > 0.0);
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        use crate::model::params::Graph;
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::scalar(4.0));
        let mut opt = AdamW::new(
            OptimizerConfig { learning_rate: 0.05, weight_decay: 0.0, total_steps: 400, ..Default::default() },
            &store,
        );
        for _ in 0..300 {
            let mut g = Graph::new(&store);
            let vx = g.p(x);
            let sq = g.tape.mul(vx, vx);
            let grads = g.backward(sq).unwrap();
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).item().abs() < 0.2, "x = {}", store.get(x).item());
    }
}
