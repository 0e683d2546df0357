use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::PathTrace;

/// Loss values of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_select: f64,
    pub total: f64,
    pub mu_used: f64,
}

impl LossReport {
    pub fn new(l_rec: f64, l_select: f64, mu: f64) -> Self {
        LossReport {
            l_rec,
            l_select,
            total: l_rec + mu * l_select,
            mu_used: mu,
        }
    }
}

fn check(truth: &[Array2<f64>], recon: &[Array2<f64>]) -> Result<()> {
    if truth.is_empty() || truth.len() != recon.len() {
        return Err(Error::domain(format!(
            "batch sizes differ or are empty: {} vs {}",
            truth.len(),
            recon.len()
        )));
    }
    for (t, r) in truth.iter().zip(recon) {
        if t.dim() != r.dim() {
            return Err(Error::domain(format!(
                "sample shapes differ: {:?} vs {:?}",
                t.dim(),
                r.dim()
            )));
        }
    }
    Ok(())
}

/// Per-pixel mean absolute error over the batch: `Σ_j ‖x_j - x̂_j‖₁ / (N · N_a)`.
pub fn loss_rec(truth: &[Array2<f64>], recon: &[Array2<f64>]) -> Result<f64> {
    check(truth, recon)?;
    let batch = truth.len() as f64;
    Ok(truth
        .iter()
        .zip(recon)
        .map(|(t, r)| (t - r).mapv(f64::abs).sum() / t.len() as f64)
        .sum::<f64>()
        / batch)
}

/// Gradient of [`loss_rec`] with respect to each reconstruction.
pub fn loss_rec_grad(truth: &[Array2<f64>], recon: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    check(truth, recon)?;
    let batch = truth.len() as f64;
    Ok(truth
        .iter()
        .zip(recon)
        .map(|(t, r)| {
            let scale = 1.0 / (t.len() as f64 * batch);
            (r - t).mapv(|d| if d == 0.0 { 0.0 } else { d.signum() * scale })
        })
        .collect())
}

/// `(1/K) Σ_k (h_G1 + h_P1)`: the number of executed residual branches per
/// stage, in `[0, 2]`.
pub fn loss_select(trace: &PathTrace) -> f64 {
    let k = trace.decisions.len();
    if k == 0 {
        return 0.0;
    }
    trace
        .decisions
        .iter()
        .map(|d| d.h_g[0] + d.h_p[0])
        .sum::<f64>()
        / k as f64
}
