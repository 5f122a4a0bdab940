// SPDX-License-Identifier: Apache-2.0

//! Hampel flagging of extreme load hours and the extreme/normal split of the
//! test set.

use crate::ingest::{AlignedFrame, Feature, WindowSet};
use crate::time::{Hour, HourRange};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HampelError {
    #[error("series is empty")]
    Empty,
    #[error("series of {len} points is shorter than the {window}-hour window")]
    TooShort { len: usize, window: usize },
    #[error("invalid Hampel configuration: {0}")]
    Config(String),
    #[error("flags are not aligned with the test windows: {0}")]
    Misaligned(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HampelConfig {
    /// Nominal window length. The window is centered, `window_hours / 2`
    /// points on each side, so its full length is odd.
    pub window_hours: usize,
    pub k_mad: f64,
    /// Lower clamp on the MAD so flat windows have a defined threshold.
    pub mad_floor: f64,
}

impl Default for HampelConfig {
    fn default() -> Self {
        HampelConfig { window_hours: 720, k_mad: 3.0, mad_floor: 1e-6 }
    }
}

impl HampelConfig {
    pub fn half_width(&self) -> usize {
        self.window_hours / 2
    }

    pub fn validate(&self) -> Result<(), HampelError> {
        if self.window_hours < 2 {
            return Err(HampelError::Config(format!("window of {} hours", self.window_hours)));
        }
        if !(self.k_mad > 0.0 && self.k_mad.is_finite()) {
            return Err(HampelError::Config(format!("k_mad {}", self.k_mad)));
        }
        if !(self.mad_floor > 0.0 && self.mad_floor.is_finite()) {
            return Err(HampelError::Config(format!("mad_floor {}", self.mad_floor)));
        }
        Ok(())
    }
}

fn median_of_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Flags `i` when `|y_i - med| > k * max(MAD, floor)` over the centered
/// window `[i - h, i + h]` truncated to the series. MAD is the raw median
/// absolute deviation from the window median.
pub fn hampel_flags(series: &[f64], cfg: &HampelConfig) -> Result<Vec<bool>, HampelError> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(HampelError::Empty);
    }
    if series.len() < cfg.window_hours {
        return Err(HampelError::TooShort { len: series.len(), window: cfg.window_hours });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(HampelError::Config("series contains non-finite values".into()));
    }
    let n = series.len();
    let h = cfg.half_width();
    let mut window: Vec<f64> = Vec::with_capacity(2 * h + 1);
    let mut deviations: Vec<f64> = Vec::with_capacity(2 * h + 1);
    let (mut lo, mut hi) = (0usize, 0usize); // current window is series[lo..hi]
    let mut flags = Vec::with_capacity(n);
    for i in 0..n {
        let (want_lo, want_hi) = (i.saturating_sub(h), (i + h + 1).min(n));
        while hi < want_hi {
            let v = series[hi];
            let at = window.partition_point(|&x| x < v);
            window.insert(at, v);
            hi += 1;
        }
        while lo < want_lo {
            let v = series[lo];
            let at = window.partition_point(|&x| x < v);
            window.remove(at);
            lo += 1;
        }
        let med = median_of_sorted(&window);
        deviations.clear();
        deviations.extend(window.iter().map(|v| (v - med).abs()));
        deviations.sort_by(f64::total_cmp);
        let mad = median_of_sorted(&deviations).max(cfg.mad_floor);
        flags.push((series[i] - med).abs() > cfg.k_mad * mad);
    }
    Ok(flags)
}

/// Subset of the test set a statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    All,
    Extreme,
    Normal,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::All, Regime::Extreme, Regime::Normal];

    pub fn name(self) -> &'static str {
        match self {
            Regime::All => "all",
            Regime::Extreme => "extreme",
            Regime::Normal => "normal",
        }
    }

    /// Whether a point with the given extreme flag belongs to this regime.
    pub fn admits(self, extreme: bool) -> bool {
        match self {
            Regime::All => true,
            Regime::Extreme => extreme,
            Regime::Normal => !extreme,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Extreme-event flags aligned to the test windows' target hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeLabels {
    pub timestamps: Vec<Hour>,
    pub demand_mw: Vec<f64>,
    pub flags: Vec<bool>,
}

impl RegimeLabels {
    pub fn counts(&self) -> (usize, usize) {
        let extreme = self.flags.iter().filter(|&&f| f).count();
        (extreme, self.flags.len() - extreme)
    }
}

/// Runs the filter on the observed hourly demand over `test_range` (rows with
/// missing demand are skipped) and reads off the flag of every test target.
pub fn label_test_targets(
    frame: &AlignedFrame,
    test_range: HourRange,
    test: &WindowSet,
    cfg: &HampelConfig,
) -> Result<RegimeLabels, HampelError> {
    let rows: Vec<usize> = (0..frame.len())
        .filter(|&r| test_range.contains(frame.timestamps[r]) && !frame.is_missing(r, Feature::Demand))
        .collect();
    let series: Vec<f64> = rows.iter().map(|&r| frame.value(r, Feature::Demand)).collect();
    let flags = hampel_flags(&series, cfg)?;
    let mut labels = RegimeLabels { timestamps: Vec::new(), demand_mw: Vec::new(), flags: Vec::new() };
    for (&ts, &y) in test.target_timestamps.iter().zip(&test.targets_mw) {
        let pos = rows
            .binary_search_by_key(&ts, |&r| frame.timestamps[r])
            .map_err(|_| HampelError::Misaligned(format!("test target {ts} has no observed demand in the test range")))?;
        labels.timestamps.push(ts);
        labels.demand_mw.push(y);
        labels.flags.push(flags[pos]);
    }
    Ok(labels)
}

/// Disjoint, exhaustive `(extreme, normal)` partition of the test windows.
pub fn split_regimes(test: &WindowSet, labels: &RegimeLabels) -> Result<(WindowSet, WindowSet), HampelError> {
    if labels.timestamps != test.target_timestamps || labels.flags.len() != test.len() {
        return Err(HampelError::Misaligned(format!(
            "{} labels for {} test windows",
            labels.flags.len(),
            test.len()
        )));
    }
    let (extreme, normal): (Vec<usize>, Vec<usize>) = (0..test.len()).partition(|&i| labels.flags[i]);
    Ok((test.subset(&extreme), test.subset(&normal)))
}

/// Writes `timestamp,demand,flag` rows.
pub fn write_flags_csv<W: Write>(labels: &RegimeLabels, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "demand", "flag"])?;
    for ((ts, y), f) in labels.timestamps.iter().zip(&labels.demand_mw).zip(&labels.flags) {
        w.write_record([ts.to_string(), y.to_string(), u8::from(*f).to_string()])?;
    }
    w.flush()?;
    Ok(())
}
