// SPDX-License-Identifier: Apache-2.0

//! Point-forecast metrics, per-regime evaluation and the physics ablation grid.

use crate::extreme_events::Regime;
use crate::time::Hour;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} targets, {1} predictions")]
    Length(usize, usize),
    #[error("no points to evaluate")]
    Empty,
    /// MAPE needs every target nonzero; the scale-dependent metrics are kept.
    #[error("MAPE undefined: target {index} is zero (MAE {mae}, RMSE {rmse})")]
    MapeUndefined { index: usize, mae: f64, rmse: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub regime: Regime,
    pub n: usize,
    pub mae_mw: f64,
    pub rmse_mw: f64,
    pub mape_pct: f64,
    /// `100 - mape_pct`.
    pub accuracy_pct: f64,
}

/// MAE, RMSE and MAPE (percent) of `yhat` against `y`. The report is tagged
/// with an empty model name and [`Regime::All`].
pub fn compute_metrics(y: &[f64], yhat: &[f64]) -> Result<MetricReport, MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::Length(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = y.len() as f64;
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    let mut zero = None;
    for (i, (&a, &p)) in y.iter().zip(yhat).enumerate() {
        let e = a - p;
        abs += e.abs();
        sq += e * e;
        if a == 0.0 {
            zero.get_or_insert(i);
        } else {
            pct += (e / a).abs();
        }
    }
    let (mae, rmse) = (abs / n, (sq / n).sqrt());
    if let Some(index) = zero {
        return Err(MetricError::MapeUndefined { index, mae, rmse });
    }
    let mape = 100.0 * pct / n;
    Ok(MetricReport {
        model: String::new(),
        regime: Regime::All,
        n: y.len(),
        mae_mw: mae,
        rmse_mw: rmse,
        mape_pct: mape,
        accuracy_pct: 100.0 - mape,
    })
}

/// Metrics over all points and each regime; a regime with no points is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReports {
    pub all: MetricReport,
    pub extreme: Option<MetricReport>,
    pub normal: Option<MetricReport>,
}

impl RegimeReports {
    pub fn get(&self, regime: Regime) -> Option<&MetricReport> {
        match regime {
            Regime::All => Some(&self.all),
            Regime::Extreme => self.extreme.as_ref(),
            Regime::Normal => self.normal.as_ref(),
        }
    }
}

pub fn evaluate_by_regime(model: &str, y: &[f64], yhat: &[f64], flags: &[bool]) -> Result<RegimeReports, MetricError> {
    if flags.len() != y.len() {
        return Err(MetricError::Length(y.len(), flags.len()));
    }
    let tagged = |regime: Regime| -> Result<Option<MetricReport>, MetricError> {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| regime.admits(flags[i])).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let ps: Vec<f64> = idx.iter().map(|&i| yhat[i]).collect();
        let mut r = compute_metrics(&ys, &ps)?;
        r.model = model.to_string();
        r.regime = regime;
        Ok(Some(r))
    };
    Ok(RegimeReports {
        all: tagged(Regime::All)?.ok_or(MetricError::Empty)?,
        extreme: tagged(Regime::Extreme)?,
        normal: tagged(Regime::Normal)?,
    })
}

/// Consecutive-hour prediction pairs `(i - 1, i)` with `|pred_i - pred_{i-1}| >
/// delta_max`. With `mask`, only pairs whose later point is masked in count.
pub fn ramp_violations(pred: &[f64], timestamps: &[Hour], delta_max: f64, mask: Option<&[bool]>) -> usize {
    (1..pred.len())
        .filter(|&i| timestamps[i].0 - timestamps[i - 1].0 == 1)
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .filter(|&i| (pred[i] - pred[i - 1]).abs() > delta_max)
        .count()
}

/// Percentage change of `value` relative to `baseline`.
pub fn delta_pct(baseline: f64, value: f64) -> f64 {
    100.0 * (value - baseline) / baseline
}

/// `(lambda1, lambda2)` settings; the first is the reference cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub configs: Vec<(f64, f64)>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid { configs: vec![(0.0, 0.0), (0.1, 0.0), (0.0, 0.05), (0.1, 0.05)] }
    }
}

/// What a grid cell reports once its ensemble is trained and scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub extreme_rmse_mw: f64,
    pub test_mape_pct: f64,
    pub ramp_violations: usize,
    pub extreme_ramp_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub outcome: Option<CellOutcome>,
    /// Extreme-subset RMSE change against the reference cell, percent.
    pub delta_pct: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, lambda1: f64, lambda2: f64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.lambda1 == lambda1 && c.lambda2 == lambda2)
    }

    pub fn complete(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_some())
    }
}

/// Runs `cell` for every grid entry. A failing cell is recorded with its
/// error and the remaining cells still run.
pub fn run_ablation<F>(grid: &AblationGrid, mut cell: F) -> AblationReport
where
    F: FnMut(f64, f64) -> Result<CellOutcome, String>,
{
    let mut cells: Vec<AblationCell> = grid
        .configs
        .iter()
        .map(|&(l1, l2)| {
            let (outcome, error) = match cell(l1, l2) {
                Ok(o) => (Some(o), None),
                Err(e) => (None, Some(e)),
            };
            AblationCell { lambda1: l1, lambda2: l2, outcome, delta_pct: None, error }
        })
        .collect();
    let baseline = cells.first().and_then(|c| c.outcome.as_ref()).map(|o| o.extreme_rmse_mw);
    if let Some(base) = baseline {
        for c in &mut cells {
            c.delta_pct = c.outcome.as_ref().map(|o| delta_pct(base, o.extreme_rmse_mw));
        }
    }
    AblationReport { cells }
}
