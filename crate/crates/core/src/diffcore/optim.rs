use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{CmusError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        OptimizerState {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
///
/// Decay shrinks each parameter by `lr * weight_decay` before the moment
/// update. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(CmusError::Dimension(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(CmusError::Contract(format!("learning rate {lr} must be >= 0")));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(CmusError::Dimension(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(CmusError::Divergence(format!(
                "non-finite gradient for parameter {}",
                p.name
            )));
        }
    }

    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let decay = lr * cfg.weight_decay;

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub total_epochs: usize,
    pub eta_min: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, total_epochs: usize) -> Self {
        LrSchedule {
            lr0,
            total_epochs,
            eta_min: 0.0,
        }
    }
}

/// Cosine annealing from `lr0` at epoch 0 down to `eta_min` at `total_epochs`.
pub fn cosine_lr(epoch: usize, sched: &LrSchedule) -> Result<f64> {
    if sched.total_epochs == 0 {
        return Err(CmusError::Contract("total_epochs must be positive".into()));
    }
    if epoch > sched.total_epochs {
        return Err(CmusError::Contract(format!(
            "epoch {epoch} beyond schedule length {}",
            sched.total_epochs
        )));
    }
    let frac = epoch as f64 / sched.total_epochs as f64;
    Ok(sched.eta_min
        + 0.5 * (sched.lr0 - sched.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
