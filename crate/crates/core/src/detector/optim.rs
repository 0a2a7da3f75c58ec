use serde::{Deserialize, Serialize};

use super::params::ModelParameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` at each fraction of the
    /// run listed here (e.g. `[0.667]`).
    pub decay_milestones: Vec<f64>,
    pub decay_factor: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_milestones: vec![2.0 / 3.0],
            decay_factor: 0.1,
            clip_norm: 10.0,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate after `progress` (fraction of the run completed).
    pub fn rate_at(&self, progress: f64) -> f64 {
        let passed = self
            .decay_milestones
            .iter()
            .filter(|&&m| progress >= m)
            .count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }
}

/// Stateful optimiser over a fixed parameter schema.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: ModelParameters,
    second: ModelParameters,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ModelParameters) -> Self {
        Optimizer {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    /// Apply one update with learning rate `lr`; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f64) -> f64 {
        let norm = grads.l2_norm();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let wd = self.config.weight_decay;
        match self.config.kind {
            OptimizerKind::Sgd => {
                let mu = self.config.momentum;
                for (((_, p), (_, g)), (_, v)) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.first.iter_mut())
                {
                    for ((pi, gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                        let grad = clip * gi + wd * *pi;
                        *vi = mu * *vi + grad;
                        *pi -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for ((((_, p), (_, g)), (_, m)), (_, v)) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    for (((pi, gi), mi), vi) in p
                        .data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(m.data.iter_mut())
                        .zip(v.data.iter_mut())
                    {
                        let grad = clip * gi;
                        *mi = b1 * *mi + (1.0 - b1) * grad;
                        *vi = b2 * *vi + (1.0 - b2) * grad * grad;
                        *pi -= lr * ((*mi / c1) / ((*vi / c2).sqrt() + eps) + wd * *pi);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::params::Tensor;
    use std::collections::BTreeMap;

    fn quad(x: f64) -> ModelParameters {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), Tensor::scalar(x));
        ModelParameters::new(m).unwrap()
    }

    #[test]
    fn both_kinds_minimise_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = OptimizerConfig {
                kind,
                weight_decay: 0.0,
                ..Default::default()
            };
            let mut p = quad(5.0);
            let mut opt = Optimizer::new(cfg, &p);
            for _ in 0..3000 {
                let x = p.get("x").data[0];
                opt.step(&mut p, &quad(2.0 * x), 0.05);
            }
            assert!(p.get("x").data[0].abs() < 1e-2, "{kind:?}");
        }
    }

    #[test]
    fn milestone_schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.rate_at(0.0), 1e-3);
        assert!((cfg.rate_at(0.7) - 1e-4).abs() < 1e-18);
    }
}
