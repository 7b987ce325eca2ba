//! Adam with bias correction and a reduce-on-plateau learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// One bias-corrected Adam update of `value` in place. `step` is the
/// 1-based index of this update.
pub fn adam_step(
    moments: &mut Moments,
    value: &mut Tensor,
    grad: &Tensor,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    value.same_shape(grad, "adam gradient")?;
    value.same_shape(&moments.m, "adam first moment")?;
    value.same_shape(&moments.v, "adam second moment")?;
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let c1 = 1.0 - libm::pow(cfg.beta1, step as f64);
    let c2 = 1.0 - libm::pow(cfg.beta2, step as f64);
    let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
    for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        let denom = libm::sqrt(v_hat) + cfg.eps;
        if denom > 0.0 {
            *p -= cfg.lr * m_hat / denom;
        }
    }
    Ok(())
}

/// Adam state for every parameter of a module, keyed by visitation order.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update to every parameter of `module` using its
    /// accumulated gradients.
    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        self.step += 1;
        let mut idx = 0;
        let mut result = Ok(());
        let (step, cfg) = (self.step, self.config);
        let moments = &mut self.moments;
        module.visit_params_mut("", &mut |_, p: &mut Param| {
            if result.is_err() {
                return;
            }
            if moments.len() <= idx {
                moments.push(Moments {
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                });
            }
            result = adam_step(&mut moments[idx], &mut p.value, &p.grad, step, &cfg);
            idx += 1;
        });
        result
    }
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement of the monitored loss, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            factor: 0.5,
            patience: 15,
            min_lr: 1e-5,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Optimizer state owned by the training loop.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub adam: Adam,
    pub plateau: PlateauScheduler,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            adam: Adam::new(config),
            plateau: PlateauScheduler::new(config.lr),
        }
    }

    pub fn lr(&self) -> f64 {
        self.adam.config.lr
    }

    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        self.adam.step(module)
    }

    /// Feeds the validation loss to the scheduler and syncs Adam's learning rate.
    pub fn end_epoch(&mut self, val_loss: f64) -> f64 {
        let lr = self.plateau.step(val_loss);
        self.adam.config.lr = lr;
        lr
    }
}
