use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// Per-parameter moment accumulators plus step counter.
pub struct AdamState<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Standard bias-corrected Adam update; zeroes gradients afterwards.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "adam_step: state built for {} params, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.epsilon);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        for (idx, p) in params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| {
                Error::Contract(format!("adam_step: parameter {idx} has no gradient"))
            })?;
            if grad.len() != self.first[idx].len() {
                return Err(Error::Contract(format!(
                    "adam_step: parameter {idx} shape changed since state creation"
                )));
            }
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for (i, &g) in grad.iter().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            }
            p.apply_update(|i, w| {
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w - lr * mhat / (vhat.sqrt() + eps)
            });
            p.zero_grad();
        }
        Ok(())
    }
}
