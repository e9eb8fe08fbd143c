// SPDX-License-Identifier: Apache-2.0

//! Point-forecast error metrics.

use ndarray::ArrayView2;

use crate::error::{CraftError, Result};

fn check(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(CraftError::shape("metric", target.dim(), pred.dim()));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn metric_mae(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check(pred, target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target.iter()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Mean squared error over all elements.
pub fn metric_mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    check(pred, target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
}
