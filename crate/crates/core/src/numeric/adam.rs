//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{dim_err, LacimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update in place. Fails without touching anything if a gradient
/// is non-finite or shapes disagree.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    names: &[String],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(dim_err("adam_step tensors", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(dim_err(
                format!("adam_step {}", name_of(names, i)),
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(LacimError::NonFiniteGradient(name_of(names, i)));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() {
        return Err(dim_err("adam_step state", state.m.len(), params.len()));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let grad = gk + cfg.weight_decay * pd[k];
            let mk = &mut m.data_mut()[k];
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * grad;
            let vk = &mut v.data_mut()[k];
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = m.data()[k] / bc1;
            let v_hat = v.data()[k] / bc2;
            pd[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

fn name_of(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("param[{i}]"))
}
