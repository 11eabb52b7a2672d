//! Adam with linear warmup.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Decay linearly to zero at `total_steps` once warmup ends.
    #[serde(default)]
    pub decay_to_zero: bool,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    /// Full-scale pre-training values.
    pub fn full() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            warmup_steps: 10_000,
            batch_size: 128,
            total_steps: 500_000,
            decay_to_zero: false,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} is not a finite non-negative number", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate used by the update that runs at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        if self.decay_to_zero && self.total_steps > self.warmup_steps {
            let left = self.total_steps.saturating_sub(step) as f64;
            return self.learning_rate * left / (self.total_steps - self.warmup_steps) as f64;
        }
        self.learning_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
            v: params.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    /// Grows or shrinks the moment buffers to match `params` after a head
    /// change. Surviving slots keep their moments.
    pub fn resize(&mut self, params: &[Tensor]) {
        self.m.truncate(params.len());
        self.v.truncate(params.len());
        for t in &params[self.m.len()..] {
            self.m.push(Tensor::zeros(t.rows, t.cols));
            self.v.push(Tensor::zeros(t.rows, t.cols));
        }
    }

    /// One Adam update. Slots without a gradient keep their value but their
    /// moments still decay. Returns the learning rate that was applied.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients, cfg: &TrainConfig) -> Result<f64> {
        if grads.per_param.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.per_param.len(), params.len())));
        }
        for (i, g) in grads.per_param.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(Error::Shape(format!("gradient {i} shape {:?} vs {:?}", g.shape(), params[i].shape())));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter slot {i}")));
                }
            }
        }
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            match &grads.per_param[i] {
                Some(g) => {
                    for (((pj, mj), vj), gj) in p.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g.data) {
                        *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
                        *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
                        let update = (*mj / c1) / ((*vj / c2).sqrt() + ADAM_EPS) + cfg.weight_decay * *pj;
                        *pj -= lr * update;
                    }
                }
                None => {
                    m.iter_mut().for_each(|x| *x *= BETA1);
                    v.iter_mut().for_each(|x| *x *= BETA2);
                }
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            warmup_steps: 4,
            batch_size: 1,
            total_steps: 8,
            decay_to_zero: false,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn warmup_boundaries() {
        let c = cfg();
        assert_eq!(c.lr_at(0), 0.0);
        assert!((c.lr_at(2) - 0.05).abs() < 1e-15);
        assert_eq!(c.lr_at(4), 0.1);
        assert_eq!(c.lr_at(7), 0.1);
        let d = TrainConfig { decay_to_zero: true, ..c };
        assert_eq!(d.lr_at(4), 0.1);
        assert!((d.lr_at(6) - 0.05).abs() < 1e-15);
        assert_eq!(d.lr_at(8), 0.0);
    }

    #[test]
    fn first_step_leaves_parameters_unchanged() {
        let mut p = vec![Tensor::from_vec(1, 2, vec![1.0, -2.0])];
        let mut s = AdamState::new(&p);
        let g = Gradients {
            per_param: vec![Some(Tensor::from_vec(1, 2, vec![0.5, 0.5]))],
        };
        assert_eq!(s.step(&mut p, &g, &cfg()).unwrap(), 0.0);
        assert_eq!(p[0].data, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
        s.step(&mut p, &g, &cfg()).unwrap();
        assert!(p[0].data[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![Tensor::from_vec(1, 1, vec![1.0])];
        let mut s = AdamState::new(&p);
        let g = Gradients {
            per_param: vec![Some(Tensor::from_vec(1, 1, vec![f64::NAN]))],
        };
        assert!(matches!(s.step(&mut p, &g, &cfg()), Err(Error::NonFinite(_))));
        assert_eq!(s.step, 0);
        assert_eq!(p[0].data, vec![1.0]);
    }

    #[test]
    fn warmup_validation() {
        let bad = TrainConfig { warmup_steps: 9, ..cfg() };
        assert!(bad.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
