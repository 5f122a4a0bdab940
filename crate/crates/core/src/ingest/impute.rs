// SPDX-License-Identifier: Apache-2.0

use super::{AlignedFrame, Feature, IngestError};
use crate::time::Hour;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_GAP_HOURS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnfilledReason {
    /// Run touches the start or end of the frame.
    Boundary,
    /// Interior run longer than the gap limit.
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfilledRun {
    pub feature: Feature,
    pub start: Hour,
    pub len: usize,
    pub reason: UnfilledReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub filled_cells: usize,
    pub unfilled: Vec<UnfilledRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputed {
    pub frame: AlignedFrame,
    pub report: ImputationReport,
}

/// Fills interior missing runs of at most `max_gap_hours` by linear
/// interpolation between the flanking observations.
///
/// Demand and the weather columns are imputed; the lag-24h column is then
/// recomputed from the imputed demand. Longer runs and runs touching the frame
/// edges stay missing and are listed in the report. The weather code is
/// interpolated and rounded to the nearest code.
pub fn impute_linear(frame: &AlignedFrame, max_gap_hours: usize) -> Result<Imputed, IngestError> {
    let mut out = frame.clone();
    let mut report = ImputationReport::default();
    let n = out.len();
    let targets = std::iter::once(Feature::Demand).chain(Feature::WEATHER);
    for feature in targets {
        let col = feature.index();
        if n > 0 && out.missing[col].iter().all(|&m| m) {
            return Err(IngestError::EntirelyMissing(feature));
        }
        let mut row = 0;
        while row < n {
            if !out.missing[col][row] {
                row += 1;
                continue;
            }
            let start = row;
            while row < n && out.missing[col][row] {
                row += 1;
            }
            let len = row - start;
            if start == 0 || row == n {
                report.unfilled.push(UnfilledRun {
                    feature,
                    start: out.timestamps[start],
                    len,
                    reason: UnfilledReason::Boundary,
                });
                continue;
            }
            if len > max_gap_hours {
                report.unfilled.push(UnfilledRun {
                    feature,
                    start: out.timestamps[start],
                    len,
                    reason: UnfilledReason::TooLong,
                });
                continue;
            }
            let left = out.columns[col][start - 1];
            let right = out.columns[col][row];
            let span = (len + 1) as f64;
            for k in 0..len {
                let frac = (k + 1) as f64 / span;
                let mut v = left + (right - left) * frac;
                if feature == Feature::WxCode {
                    v = v.round();
                }
                out.set(start + k, feature, Some(v));
                report.filled_cells += 1;
            }
        }
    }
    out.refresh_lag();
    Ok(Imputed { frame: out, report })
}
