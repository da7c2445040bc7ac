//! Masked per-token losses on RoI logits.
//!
//! Targets are dense `f64` maps where a negative value marks an ignored
//! token. Every turn row of the logits is scored against the same target.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::sigmoid;
use crate::pseudo_label::LABEL_IGNORE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binary cross-entropy on logits (hard or soft targets).
    Bce,
    /// Squared error between `sigmoid(logit)` and the target.
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    /// Per-token target in `[0, 1]`, or `-1` when ignored.
    pub values: Vec<f64>,
    pub kind: LossKind,
}

impl TargetMap {
    pub fn from_labels(labels: &[i8]) -> Self {
        Self {
            values: labels.iter().map(|&l| l as f64).collect(),
            kind: LossKind::Bce,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.0).count()
    }
}

/// `log(1 + e^z) - z * y`, evaluated without overflow.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Summed loss over valid tokens of every turn row, the number of valid
/// entries, and the gradient of the sum with respect to each logit.
pub fn masked_loss_sum(logits: &Array2<f64>, target: &TargetMap) -> Result<(f64, usize, Array2<f64>)> {
    if logits.ncols() != target.values.len() {
        return Err(Error::shape("RoI logits width", target.values.len(), logits.ncols()));
    }
    let mut grad = Array2::zeros(logits.dim());
    let mut sum = 0.0;
    let mut valid = 0;
    for (row, mut grow) in logits.rows().into_iter().zip(grad.rows_mut()) {
        for ((&z, &y), g) in row.iter().zip(&target.values).zip(grow.iter_mut()) {
            if y < 0.0 {
                continue;
            }
            valid += 1;
            match target.kind {
                LossKind::Bce => {
                    sum += bce_with_logits(z, y);
                    *g = sigmoid(z) - y;
                }
                LossKind::Mse => {
                    let p = sigmoid(z);
                    sum += (p - y) * (p - y);
                    *g = 2.0 * (p - y) * p * (1.0 - p);
                }
            }
        }
    }
    Ok((sum, valid, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub valid: usize,
    /// Every label was ignored; loss and gradient are zero.
    pub skipped: bool,
}

/// Mean BCE over tokens whose label is not `-1`.
pub fn masked_bce_loss(logits: &Array2<f64>, labels: &[i8]) -> Result<MaskedLoss> {
    if let Some(&bad) = labels.iter().find(|&&l| !(LABEL_IGNORE..=1).contains(&l)) {
        return Err(Error::Config(format!("label {bad} outside {{-1, 0, 1}}")));
    }
    let (sum, valid, mut grad) = masked_loss_sum(logits, &TargetMap::from_labels(labels))?;
    if valid == 0 {
        return Ok(MaskedLoss {
            loss: 0.0,
            grad,
            valid,
            skipped: true,
        });
    }
    grad.mapv_inplace(|g| g / valid as f64);
    Ok(MaskedLoss {
        loss: sum / valid as f64,
        grad,
        valid,
        skipped: false,
    })
}
