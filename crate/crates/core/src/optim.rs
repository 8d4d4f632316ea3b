//! First-order optimizers over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Optimizer family. Plain mini-batch gradient descent is the default; the
/// adaptive-moment variant uses decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adamw {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::Adamw { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adamw { .. } => n_params,
        };
        Optimizer { kind, lr, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    /// One descent step on `params` along `grad` (the gradient of the loss being
    /// minimized). A zero learning rate leaves `params` untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        if self.lr == 0.0 {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adamw { beta1, beta2, eps, weight_decay } => {
                self.t += 1;
                let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
                let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * (m_hat / (libm::sqrt(v_hat) + eps) + weight_decay * params[i]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = vec![1.0, -2.0];
        Optimizer::new(OptimizerKind::Sgd, 0.5, 2).step(&mut p, &[2.0, -4.0]);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut p = vec![0.0, 0.0];
        Optimizer::new(OptimizerKind::adamw(), 0.01, 2).step(&mut p, &[3.0, -1e-3]);
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = vec![-0.0, 1.5];
        for kind in [OptimizerKind::Sgd, OptimizerKind::adamw()] {
            Optimizer::new(kind, 0.0, 2).step(&mut p, &[f64::NAN, 1.0]);
            assert_eq!(p[0].to_bits(), (-0.0f64).to_bits());
            assert_eq!(p[1], 1.5);
        }
    }
}
