//! Adam and annealed-SGD optimizers acting on a model's parameter list.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    /// SGD with momentum and rate `lr0 / (1 + alpha·p)^gamma` at progress `p`.
    Sgd {
        lr0: f64,
        alpha: f64,
        gamma: f64,
        momentum: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }

    /// The annealed SGD used for fine-tuning pretrained backbones.
    pub fn annealed_sgd() -> Self {
        OptimizerConfig::Sgd { lr0: 0.001, alpha: 0.001, gamma: 0.75, momentum: 0.9, weight_decay: 5e-4 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam { lr, beta1, beta2, eps, weight_decay } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
            OptimizerConfig::Sgd { lr0, alpha, gamma, momentum, weight_decay } => {
                lr0 > 0.0 && alpha >= 0.0 && gamma >= 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0
            }
        };
        if !ok {
            bail!(Config, "optimizer settings out of range: {:?}", self);
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(2e-4)
    }
}

/// Optimizer state for one model. Buffers are created lazily on the first
/// step and must keep matching the parameter shapes afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    progress: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, steps: 0, progress: 0.0, first: Vec::new(), second: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Training progress in `[0, 1]`; only the SGD schedule reads it.
    pub fn set_progress(&mut self, p: f64) {
        self.progress = p.clamp(0.0, 1.0);
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Drops moment buffers and the step counter.
    pub fn reset(&mut self) {
        self.steps = 0;
        self.first.clear();
        self.second.clear();
    }

    pub fn learning_rate(&self) -> f64 {
        match self.config {
            OptimizerConfig::Adam { lr, .. } => lr,
            OptimizerConfig::Sgd { lr0, alpha, gamma, .. } => lr0 / libm::pow(1.0 + alpha * self.progress, gamma),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            bail!(Contract, "parameter {} has no gradient", p.name);
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(b, p)| b.len() != p.value.len())
        {
            bail!(Contract, "optimizer buffers do not match the parameter list");
        }
        self.steps += 1;
        let lr = self.learning_rate();
        match self.config {
            OptimizerConfig::Adam { beta1, beta2, eps, weight_decay, .. } => {
                let c1 = 1.0 - libm::pow(beta1, self.steps as f64);
                let c2 = 1.0 - libm::pow(beta2, self.steps as f64);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grad = p.grad.take().expect("checked above");
                    for (((x, g), mi), vi) in
                        p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let g = g + weight_decay * *x;
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x -= lr * mhat / (libm::sqrt(vhat) + eps);
                    }
                }
            }
            OptimizerConfig::Sgd { momentum, weight_decay, .. } => {
                for (p, buf) in params.iter_mut().zip(&mut self.first) {
                    let grad = p.grad.take().expect("checked above");
                    for ((x, g), b) in p.value.data_mut().iter_mut().zip(grad.data()).zip(buf.iter_mut()) {
                        let g = g + weight_decay * *x;
                        *b = momentum * *b + g;
                        *x -= lr * *b;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64, g: Option<f64>) -> Param {
        let mut p = Param::new("x", Tensor::vector(vec![v]));
        p.grad = g.map(|g| Tensor::vector(vec![g]));
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let lr = 2e-4;
        let mut opt =
            Optimizer::new(OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 });
        let mut ps = [scalar_param(0.5, Some(1.0))];
        opt.step(&mut ps).unwrap();
        // bias-corrected m̂ = 1, v̂ = 1, so Δ = lr / (1 + eps)
        let expected = 0.5 - lr / (1.0 + 1e-8);
        assert!((ps[0].value.data()[0] - expected).abs() < 1e-15);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        for cfg in [
            OptimizerConfig::Adam { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
            OptimizerConfig::Sgd { lr0: 0.1, alpha: 0.001, gamma: 0.75, momentum: 0.9, weight_decay: 0.0 },
        ] {
            let mut opt = Optimizer::new(cfg);
            let mut ps = [scalar_param(1.25, Some(0.0))];
            opt.step(&mut ps).unwrap();
            assert_eq!(ps[0].value.data()[0], 1.25);
        }
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut ps = [scalar_param(1.0, None)];
        assert!(matches!(opt.step(&mut ps), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn sgd_schedule() {
        let mut opt = Optimizer::new(OptimizerConfig::annealed_sgd());
        assert_eq!(opt.learning_rate(), 0.001);
        opt.set_progress(1.0);
        assert!((opt.learning_rate() - 0.001 / libm::pow(1.001, 0.75)).abs() < 1e-18);
    }

    #[test]
    fn sgd_momentum_update() {
        let mut opt =
            Optimizer::new(OptimizerConfig::Sgd { lr0: 0.1, alpha: 0.0, gamma: 0.0, momentum: 0.5, weight_decay: 0.0 });
        let mut ps = [scalar_param(0.0, Some(1.0))];
        opt.step(&mut ps).unwrap();
        assert!((ps[0].value.data()[0] + 0.1).abs() < 1e-15);
        ps[0].grad = Some(Tensor::vector(vec![1.0]));
        opt.step(&mut ps).unwrap();
        // buffer 0.5·1 + 1 = 1.5
        assert!((ps[0].value.data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn reset_clears_state() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut ps = [scalar_param(0.0, Some(1.0))];
        opt.step(&mut ps).unwrap();
        opt.reset();
        assert_eq!(opt.steps(), 0);
        assert_eq!(opt, Optimizer::new(OptimizerConfig::default()));
    }
}
