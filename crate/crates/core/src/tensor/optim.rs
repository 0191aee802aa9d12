use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD or Adam over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if config.lr.is_nan() || config.lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", config.lr)));
        }
        Ok(Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let OptimizerConfig {
            kind,
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        match kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gv;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gv * gv;
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        for p in params.iter_mut() {
            p.round_to_dtype();
        }
        Ok(())
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            lr,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(config(OptimizerKind::Sgd, 0.1)).unwrap();
        let mut p = Tensor::from_vec(vec![1.0]);
        opt.step(&mut [&mut p], &[&Tensor::from_vec(vec![2.0])]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
        opt.step(&mut [&mut p], &[&Tensor::from_vec(vec![0.0])]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // t = 1: mhat = g, vhat = g², update = lr·g/(|g| + eps)
        for g in [0.5, -3.0, 1e-3] {
            let mut opt = Optimizer::new(config(OptimizerKind::Adam, 0.01)).unwrap();
            let mut p = Tensor::from_vec(vec![1.0]);
            opt.step(&mut [&mut p], &[&Tensor::from_vec(vec![g])]).unwrap();
            let expected = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - p.item()).abs() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut opt = Optimizer::new(config(OptimizerKind::Adam, 0.01)).unwrap();
        let mut p = Tensor::from_vec(vec![0.3, -2.0]);
        opt.step(&mut [&mut p], &[&Tensor::zeros(vec![2])]).unwrap();
        assert_eq!(p.data(), &[0.3, -2.0]);
    }

    #[test]
    fn rejects_bad_learning_rate_and_shapes() {
        assert!(Optimizer::new(config(OptimizerKind::Sgd, 0.0)).is_err());
        assert!(Optimizer::new(config(OptimizerKind::Adam, -1.0)).is_err());
        let mut opt = Optimizer::new(config(OptimizerKind::Sgd, 0.1)).unwrap();
        let mut p = Tensor::zeros(vec![2]);
        assert!(opt.step(&mut [&mut p], &[&Tensor::zeros(vec![3])]).is_err());
    }
}
