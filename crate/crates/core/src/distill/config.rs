use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub image_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Feature-pyramid matching recipe retuned for the toy nets: Adam with
    /// small batches.
    pub fn stfpm(image_size: usize, seed: u64) -> Self {
        Self {
            batch_size: 2,
            epochs: 40,
            learning_rate: 4e-3,
            weight_decay: 1e-4,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            image_size,
            seed,
        }
    }

    /// Adam with a low first-moment decay, the reverse-distillation recipe.
    pub fn rd(image_size: usize, seed: u64) -> Self {
        Self {
            batch_size: 16,
            epochs: 40,
            learning_rate: 0.005,
            weight_decay: 1e-5,
            optimizer: Optimizer::Adam {
                beta1: 0.5,
                beta2: 0.999,
            },
            image_size,
            seed,
        }
    }

    /// Adam for the student ensemble.
    pub fn us(image_size: usize, seed: u64) -> Self {
        Self {
            batch_size: 8,
            epochs: 40,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            image_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("momentum must be in [0, 1), got {momentum}"))
            }
            Optimizer::Adam { beta1, beta2 } if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) => {
                bad(format!("Adam betas must be in [0, 1), got ({beta1}, {beta2})"))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer state for one parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            optimizer: cfg.optimizer,
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: match cfg.optimizer {
                Optimizer::Adam { .. } => zeros(),
                Optimizer::Sgd { .. } => Vec::new(),
            },
        }
    }

    /// Applies one update; weight decay is added to the gradient.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &Gradients) {
        self.step += 1;
        let wd = self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(&grads.tensors).enumerate() {
            let m = &mut self.m[i];
            match self.optimizer {
                Optimizer::Sgd { momentum } => {
                    for ((x, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let gd = f64::from(gv) + wd * f64::from(*x);
                        *mv = momentum * *mv + gd;
                        *x = (f64::from(*x) - self.lr * *mv) as f32;
                    }
                }
                Optimizer::Adam { beta1, beta2 } => {
                    let v = &mut self.v[i];
                    let t = self.step as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (((x, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gd = f64::from(gv) + wd * f64::from(*x);
                        *mv = beta1 * *mv + (1.0 - beta1) * gd;
                        *vv = beta2 * *vv + (1.0 - beta2) * gd * gd;
                        let upd = self.lr * (*mv / c1) / ((*vv / c2).sqrt() + 1e-8);
                        *x = (f64::from(*x) - upd) as f32;
                    }
                }
            }
        }
    }
}
