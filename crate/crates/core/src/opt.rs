//! SGD-with-momentum and Adam, applied per parameter group. Weight decay is
//! coupled (added to the gradient), so a lone SGD step with zero loss
//! gradient shrinks each weight by exactly `1 - lr * wd`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    SgdMomentum,
    Adam,
}

/// Optimizer choice plus schedule. The learning rate drops once by
/// `lr_decay_factor` when the iteration counter reaches `lr_decay_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptKind,
    pub lr: f64,
    pub lr_decay_step: Option<u64>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn adam() -> Self {
        OptimizerSpec {
            kind: OptKind::Adam,
            lr: 0.001,
            lr_decay_step: None,
            lr_decay_factor: 1.0,
            momentum: 0.9,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerSpec {
            kind: OptKind::SgdMomentum,
            lr: 0.1,
            lr_decay_step: None, // resolved to 2/3 of the budget by the trainer
            lr_decay_factor: 0.1,
            momentum: 0.9,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("optimizer", "learning rate must be > 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("optimizer", "weight decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("optimizer", "betas must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("optimizer", "momentum must be in [0, 1)"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::invalid("optimizer", "decay factor must be > 0"));
        }
        Ok(())
    }

    /// Learning rate at a given iteration.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.lr_decay_step {
            Some(step) if iteration >= step => self.lr * self.lr_decay_factor,
            _ => self.lr,
        }
    }
}

/// Per-group optimizer state: one slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupState {
    /// SGD velocity, or Adam first moment.
    m: Vec<Tensor>,
    /// Adam second moment (unused by SGD).
    v: Vec<Tensor>,
    /// Number of updates applied to this group (Adam bias correction).
    pub t: u64,
}

impl GroupState {
    pub fn new(params: &[Tensor]) -> Self {
        GroupState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    /// One optimizer update over a whole group. `grads` must align with
    /// `params` slot by slot.
    pub fn apply(
        &mut self,
        spec: &OptimizerSpec,
        iteration: u64,
        params: &mut [Tensor],
        grads: &[&Tensor],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid("optimizer", "group size mismatch"));
        }
        let lr = spec.lr_at(iteration);
        self.t += 1;
        match spec.kind {
            OptKind::SgdMomentum => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((pv, &gv), mv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut())
                    {
                        let grad = gv + spec.weight_decay * *pv;
                        *mv = spec.momentum * *mv + grad;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptKind::Adam => {
                let bc1 = 1.0 - spec.beta1.powi(self.t as i32);
                let bc2 = 1.0 - spec.beta2.powi(self.t as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(&mut self.v))
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let grad = gv + spec.weight_decay * *pv;
                        *mv = spec.beta1 * *mv + (1.0 - spec.beta1) * grad;
                        *vv = spec.beta2 * *vv + (1.0 - spec.beta2) * grad * grad;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + spec.adam_eps);
                    }
                }
            }
        }
        Ok(())
    }
}
