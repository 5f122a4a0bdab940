// SPDX-License-Identifier: Apache-2.0

use super::{AlignedFrame, Feature, IngestError, Standardizer, FEATURE_COUNT};
use crate::time::{Hour, HourRange};
use serde::{Deserialize, Serialize};
use std::fmt;

pub const WINDOW_HOURS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// Chronological train/validation/test ranges, each half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: HourRange,
    pub val: HourRange,
    pub test: HourRange,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        for (tag, r) in [(SplitTag::Train, self.train), (SplitTag::Val, self.val), (SplitTag::Test, self.test)] {
            if r.is_empty() {
                return Err(IngestError::Split(format!("{tag} range is empty")));
            }
        }
        if self.train.end > self.val.start || self.val.end > self.test.start {
            return Err(IngestError::Split(
                "ranges must be disjoint and ordered train < val < test".into(),
            ));
        }
        Ok(())
    }

    pub fn range(&self, tag: SplitTag) -> HourRange {
        match tag {
            SplitTag::Train => self.train,
            SplitTag::Val => self.val,
            SplitTag::Test => self.test,
        }
    }
}

/// Standardized 24-hour input windows with next-hour targets.
///
/// `inputs` is `M x 24 x 13`, row-major. Targets are kept both in MW and in
/// standardized demand units; the target-hour air temperature and the demand
/// 24 hours before the target (persistence forecast) are kept unstandardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub split: SplitTag,
    pub inputs: Vec<f64>,
    pub targets_mw: Vec<f64>,
    pub targets_std: Vec<f64>,
    pub target_timestamps: Vec<Hour>,
    pub target_air_temp_c: Vec<f64>,
    pub persistence_mw: Vec<f64>,
}

pub const WINDOW_LEN: usize = WINDOW_HOURS * FEATURE_COUNT;

impl WindowSet {
    pub fn empty(split: SplitTag) -> Self {
        WindowSet {
            split,
            inputs: Vec::new(),
            targets_mw: Vec::new(),
            targets_std: Vec::new(),
            target_timestamps: Vec::new(),
            target_air_temp_c: Vec::new(),
            persistence_mw: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets_mw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets_mw.is_empty()
    }

    pub fn window(&self, m: usize) -> &[f64] {
        &self.inputs[m * WINDOW_LEN..(m + 1) * WINDOW_LEN]
    }

    /// Copies the listed windows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        let mut out = WindowSet::empty(self.split);
        for &i in indices {
            out.inputs.extend_from_slice(self.window(i));
            out.targets_mw.push(self.targets_mw[i]);
            out.targets_std.push(self.targets_std[i]);
            out.target_timestamps.push(self.target_timestamps[i]);
            out.target_air_temp_c.push(self.target_air_temp_c[i]);
            out.persistence_mw.push(self.persistence_mw[i]);
        }
        out
    }

    /// Index pairs `(i - 1, i)` whose targets are consecutive hours.
    pub fn consecutive_pairs(&self) -> Vec<(usize, usize)> {
        (1..self.len())
            .filter(|&i| self.target_timestamps[i].0 - self.target_timestamps[i - 1].0 == 1)
            .map(|i| (i - 1, i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSplits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl WindowSplits {
    pub fn get(&self, tag: SplitTag) -> &WindowSet {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }
}

fn windows_for(
    frame: &AlignedFrame,
    standardizer: &Standardizer,
    range: HourRange,
    tag: SplitTag,
) -> Result<WindowSet, IngestError> {
    let n = frame.len();
    let mut set = WindowSet::empty(tag);
    let usable: Vec<bool> = (0..n)
        .map(|r| range.contains(frame.timestamps[r]) && frame.row_complete(r))
        .collect();
    // Length of the run of usable rows ending at each row.
    let mut run = vec![0usize; n];
    for r in 0..n {
        run[r] = if usable[r] { if r > 0 { run[r - 1] + 1 } else { 1 } } else { 0 };
    }
    for target in WINDOW_HOURS..n {
        if run[target] < WINDOW_HOURS + 1 {
            continue;
        }
        let first = target - WINDOW_HOURS;
        for row in first..target {
            for f in Feature::ALL {
                set.inputs.push(standardizer.transform(f, frame.value(row, f)));
            }
        }
        let y = frame.value(target, Feature::Demand);
        set.targets_mw.push(y);
        set.targets_std.push(standardizer.transform(Feature::Demand, y));
        set.target_timestamps.push(frame.timestamps[target]);
        set.target_air_temp_c.push(frame.value(target, Feature::AirTemp));
        set.persistence_mw.push(frame.value(target, Feature::LagDemand24));
    }
    if set.is_empty() {
        return Err(IngestError::EmptyWindows(tag));
    }
    Ok(set)
}

/// Builds 24-hour windows for each split.
///
/// A window ending at hour `t` targets hour `t + 1`; all 25 rows must lie in
/// the split's range and be fully observed, so windows never straddle splits
/// or unfilled gaps. A contiguous complete segment of `N` hours yields `N - 24`
/// windows.
pub fn make_windows(
    frame: &AlignedFrame,
    standardizer: &Standardizer,
    split: &SplitSpec,
) -> Result<WindowSplits, IngestError> {
    split.validate()?;
    Ok(WindowSplits {
        train: windows_for(frame, standardizer, split.train, SplitTag::Train)?,
        val: windows_for(frame, standardizer, split.val, SplitTag::Val)?,
        test: windows_for(frame, standardizer, split.test, SplitTag::Test)?,
    })
}
