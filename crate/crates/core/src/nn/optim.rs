//! Adam with decoupled weight decay and a linear learning-rate schedule.

use crate::tensor::Param;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Linear decay `lr0 * (1 - t / total)`, floored at 0.
pub fn linear_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (lr0 * (1.0 - t as f64 / total as f64)).max(0.0)
}

/// One Adam update at step `t` (1-based) for every non-frozen parameter.
///
/// Weight decay is decoupled and touches only params flagged `decay`.
pub fn adam_step(
    params: &mut [&mut Param],
    state: &mut AdamState,
    t: usize,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("adam step index is 1-based"));
    }
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|p| (vec![0.0; p.value.numel()], vec![0.0; p.value.numel()]))
            .collect();
    }
    if state.moments.len() != params.len() {
        return Err(Error::shape("adam state", &[state.moments.len()], &[params.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (p, (m, v)) in params.iter_mut().zip(state.moments.iter_mut()) {
        if p.frozen {
            continue;
        }
        let decay = if p.decay { weight_decay } else { 0.0 };
        let grad = p.value.grad.take().unwrap_or_else(|| vec![0.0; m.len()]);
        for (i, w) in p.value.data.iter_mut().enumerate() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            *w -= lr * (step + decay * *w);
        }
        p.value.grad = Some(grad);
    }
    Ok(())
}
