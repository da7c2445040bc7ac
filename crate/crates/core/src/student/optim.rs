//! AdamW with linear warm-up followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimConfig {
    /// The large-scale recipe: AdamW, betas (0.9, 0.98), no weight decay,
    /// 3% linear warm-up, cosine decay, peak 5e-5, batch 128, one epoch.
    pub fn reference() -> Self {
        Self {
            peak_lr: 5e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_ratio: 0.03,
            batch_size: 128,
            epochs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} not in [0, 1)", self.warmup_ratio)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// Desk-scale defaults: the reference recipe with a larger step size and
/// several passes so a few hundred samples suffice.
impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            batch_size: 8,
            epochs: 3,
            ..Self::reference()
        }
    }
}

/// `ceil(ratio * total)`, immune to representation error such as
/// `0.03 * 100 = 3.0000000000000004`.
pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    let x = ratio * total as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

pub fn lr_at_step(step: usize, total: usize, cfg: &OptimConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("learning-rate schedule needs at least one step".into()));
    }
    let step = step.min(total);
    let warm = warmup_steps(total, cfg.warmup_ratio);
    if step < warm {
        return Ok(cfg.peak_lr * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(cfg.peak_lr);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: usize,
    pub lr: f64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl TrainingState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let first: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self {
            step: 0,
            lr: 0.0,
            second: first.clone(),
            first,
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// Gradients are checked for non-finite values before any parameter moves.
pub fn adamw_step(
    state: &mut TrainingState,
    params: &mut [&mut [f64]],
    grads: &[(String, &[f64])],
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape("optimizer parameter groups", state.first.len(), params.len()));
    }
    for ((p, (name, g)), m) in params.iter().zip(grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape(format!("gradient for {name}"), p.len(), g.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, (_, g)), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}
