//! Central finite-difference check of the analytic student gradients.

use ndarray::ArrayView2;

use super::loss::{masked_loss_sum, TargetMap};
use super::model::StudentModel;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter with the largest error.
    pub worst: String,
}

/// Mean masked loss over valid entries.
fn mean_loss(model: &StudentModel, states: &ArrayView2<f64>, visual: usize, target: &TargetMap) -> Result<f64> {
    let (value, _) = model.loss_and_grads(states, visual, |z| {
        let (sum, valid, g) = masked_loss_sum(z, target)?;
        Ok((sum / valid.max(1) as f64, g))
    })?;
    Ok(value)
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` for every trainable
/// parameter. The floor keeps parameters with vanishing gradients from
/// dividing rounding noise by zero.
pub fn check_gradients(
    model: &StudentModel,
    states: &ArrayView2<f64>,
    visual: usize,
    target: &TargetMap,
    step: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = model.loss_and_grads(states, visual, |z| {
        let (sum, valid, mut g) = masked_loss_sum(z, target)?;
        let n = valid.max(1) as f64;
        g.mapv_inplace(|v| v / n);
        Ok((sum / n, g))
    })?;
    let analytic: Vec<(String, Vec<f64>)> = grads.params().into_iter().map(|(_, g)| g.to_vec()).zip(model.trainable_params()).map(|(g, (n, _))| (n, g)).collect();
    let mut probe = model.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (k, (name, a)) in analytic.iter().enumerate() {
        for i in 0..a.len() {
            let orig = probe.trainable_params_mut()[k][i];
            probe.trainable_params_mut()[k][i] = orig + step;
            let up = mean_loss(&probe, states, visual, target)?;
            probe.trainable_params_mut()[k][i] = orig - step;
            let down = mean_loss(&probe, states, visual, target)?;
            probe.trainable_params_mut()[k][i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (a[i] - numeric).abs() / a[i].abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(out)
}
