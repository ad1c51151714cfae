use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its subgradient `sign(pred - target) / n`.
pub fn mae_loss(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    Ok((loss, diff.mapv(|d| sign(d) / n)))
}

/// Elastic penalty `l1*|w| + l2*w^2`, applied to recurrent-layer parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegSpec {
    pub l1: f64,
    pub l2: f64,
}

impl Default for RegSpec {
    fn default() -> Self {
        RegSpec { l1: 0.01, l2: 0.01 }
    }
}

impl RegSpec {
    pub fn none() -> Self {
        RegSpec { l1: 0.0, l2: 0.0 }
    }

    pub fn penalty(&self, values: &[f64]) -> f64 {
        values.iter().map(|w| self.l1 * w.abs() + self.l2 * w * w).sum()
    }

    /// Add the penalty's (sub)gradient to `grad`.
    pub fn accumulate_grad(&self, values: &[f64], grad: &mut [f64]) {
        for (g, w) in grad.iter_mut().zip(values) {
            *g += self.l1 * sign(*w) + 2.0 * self.l2 * w;
        }
    }
}
