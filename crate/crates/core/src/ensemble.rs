// SPDX-License-Identifier: Apache-2.0

//! Convex two-member fusion of branch forecasts.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnsembleError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("need at least two validation points, got {0}")]
    TooFew(usize),
    #[error("member predictions are identical; the fusion weight is undetermined")]
    Degenerate,
    #[error("non-finite value in ensemble inputs")]
    NonFinite,
}

/// Fusion weights on the unit simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub w_cnn: f64,
    pub w_t: f64,
}

impl EnsembleWeights {
    /// Fallback for a degenerate fit.
    pub const EQUAL: EnsembleWeights = EnsembleWeights { w_cnn: 0.5, w_t: 0.5 };

    /// `(w, 1 - w)` for `w` clamped to `[0, 1]`.
    pub fn from_cnn_weight(w: f64) -> Self {
        let w = w.clamp(0.0, 1.0);
        EnsembleWeights { w_cnn: w, w_t: 1.0 - w }
    }
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<(), EnsembleError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(EnsembleError::Length(format!("{what}: {} vs {}", a.len(), b.len())))
    }
}

/// Least-squares weight for `w p_c + (1 - w) p_t`, clamped to `[0, 1]`:
/// `w* = <y - p_t, p_c - p_t> / |p_c - p_t|^2`.
pub fn fit_weights(y: &[f64], pred_cnn: &[f64], pred_t: &[f64]) -> Result<EnsembleWeights, EnsembleError> {
    same_len(y, pred_cnn, "target vs cnn")?;
    same_len(y, pred_t, "target vs transformer")?;
    if y.len() < 2 {
        return Err(EnsembleError::TooFew(y.len()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((&y, &c), &t) in y.iter().zip(pred_cnn).zip(pred_t) {
        let d = c - t;
        num += (y - t) * d;
        den += d * d;
    }
    if !(num.is_finite() && den.is_finite()) {
        return Err(EnsembleError::NonFinite);
    }
    if den == 0.0 {
        return Err(EnsembleError::Degenerate);
    }
    Ok(EnsembleWeights::from_cnn_weight(num / den))
}

pub fn predict_ensemble(weights: &EnsembleWeights, pred_cnn: &[f64], pred_t: &[f64]) -> Result<Vec<f64>, EnsembleError> {
    same_len(pred_cnn, pred_t, "cnn vs transformer")?;
    Ok(pred_cnn.iter().zip(pred_t).map(|(c, t)| weights.w_cnn * c + weights.w_t * t).collect())
}

/// Mean squared error, used for the fusion report.
pub fn mse(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Member and ensemble validation errors alongside the fitted weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub weights: EnsembleWeights,
    /// Whether the fit was degenerate and [`EnsembleWeights::EQUAL`] used.
    pub degenerate: bool,
    pub val_mse_cnn: f64,
    pub val_mse_transformer: f64,
    pub val_mse_ensemble: f64,
}

/// Fits weights, falling back to equal weights on a degenerate fit.
pub fn fuse(y_val: &[f64], pred_cnn: &[f64], pred_t: &[f64]) -> Result<FusionReport, EnsembleError> {
    let (weights, degenerate) = match fit_weights(y_val, pred_cnn, pred_t) {
        Ok(w) => (w, false),
        Err(EnsembleError::Degenerate) => (EnsembleWeights::EQUAL, true),
        Err(e) => return Err(e),
    };
    let ens = predict_ensemble(&weights, pred_cnn, pred_t)?;
    Ok(FusionReport {
        weights,
        degenerate,
        val_mse_cnn: mse(y_val, pred_cnn),
        val_mse_transformer: mse(y_val, pred_t),
        val_mse_ensemble: mse(y_val, &ens),
    })
}
