// SPDX-License-Identifier: Apache-2.0

use super::calendar::encode_calendar;
use super::{Feature, IngestError, RawLoadRecord, RawWeatherRecord, FEATURE_COUNT};
use crate::time::Hour;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// The three reference ASOS stations averaged into the weather columns.
pub const REFERENCE_STATIONS: [&str; 3] = ["BKS", "JDD", "TME"];

/// Hourly table of load, weather and calendar columns.
///
/// Columns are stored column-major in [`Feature`] order. Missing cells hold
/// `NaN` and are flagged in `missing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedFrame {
    pub timestamps: Vec<Hour>,
    pub columns: Vec<Vec<f64>>,
    pub missing: Vec<Vec<bool>>,
}

impl AlignedFrame {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn column(&self, f: Feature) -> &[f64] {
        &self.columns[f.index()]
    }

    pub fn value(&self, row: usize, f: Feature) -> f64 {
        self.columns[f.index()][row]
    }

    pub fn is_missing(&self, row: usize, f: Feature) -> bool {
        self.missing[f.index()][row]
    }

    pub fn row_complete(&self, row: usize) -> bool {
        self.missing.iter().all(|m| !m[row])
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().map(|m| m.iter().filter(|&&x| x).count()).sum()
    }

    /// Row index of a timestamp, if it falls on the grid.
    pub fn row_of(&self, h: Hour) -> Option<usize> {
        let first = *self.timestamps.first()?;
        let idx = h.0 - first.0;
        (idx >= 0 && (idx as usize) < self.len()).then_some(idx as usize)
    }

    pub(crate) fn set(&mut self, row: usize, f: Feature, v: Option<f64>) {
        match v {
            Some(x) => {
                self.columns[f.index()][row] = x;
                self.missing[f.index()][row] = false;
            }
            None => {
                self.columns[f.index()][row] = f64::NAN;
                self.missing[f.index()][row] = true;
            }
        }
    }

    /// Recomputes the lag-24h column from the demand column.
    pub(crate) fn refresh_lag(&mut self) {
        let n = self.len();
        for row in 0..n {
            let v = if row >= 24 && !self.is_missing(row - 24, Feature::Demand) {
                Some(self.value(row - 24, Feature::Demand))
            } else {
                None
            };
            self.set(row, Feature::LagDemand24, v);
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Most frequent code; ties resolve to the higher (more severe) code.
fn mode_code(codes: &[i64]) -> Option<f64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &c in codes {
        *counts.entry(c).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(c, _)| c as f64)
}

/// Builds the hourly frame spanning the first to last load hour.
///
/// Weather columns are per-variable means over the requested stations that
/// report a value that hour; the weather code is the modal code. Hours with
/// no reporting station, and hours without a load record, are marked missing.
/// Calendar columns are encoded with an empty holiday set; call
/// [`encode_calendar`] to apply holidays.
pub fn align_hourly(
    load: &[RawLoadRecord],
    weather: &[RawWeatherRecord],
    stations: &BTreeSet<String>,
) -> Result<AlignedFrame, IngestError> {
    if stations.is_empty() {
        return Err(IngestError::Alignment("no stations requested".into()));
    }
    let (first, last) = match (load.first(), load.last()) {
        (Some(a), Some(b)) => (a.timestamp, b.timestamp),
        _ => return Err(IngestError::Alignment("load series is empty".into())),
    };
    let n = (last.0 - first.0 + 1) as usize;

    #[derive(Default)]
    struct Bucket {
        temp: Vec<f64>,
        feels: Vec<f64>,
        humidity: Vec<f64>,
        wind: Vec<f64>,
        precip: Vec<f64>,
        codes: Vec<i64>,
    }
    let mut buckets: HashMap<usize, Bucket> = HashMap::new();
    let mut seen_stations = BTreeSet::new();
    for w in weather {
        if !stations.contains(&w.station_id) || w.timestamp < first || w.timestamp > last {
            continue;
        }
        seen_stations.insert(w.station_id.as_str());
        let b = buckets.entry((w.timestamp.0 - first.0) as usize).or_default();
        b.temp.extend(w.air_temp_c);
        b.feels.extend(w.feels_like_c);
        b.humidity.extend(w.humidity_pct);
        b.wind.extend(w.wind_ms);
        b.precip.extend(w.precip_mm);
        b.codes.extend(w.wx_code);
    }
    if buckets.is_empty() {
        return Err(IngestError::Alignment(format!(
            "no weather observations from stations {:?} overlap the load range {first}..{last}",
            stations
        )));
    }

    let mut frame = AlignedFrame {
        timestamps: (0..n as i64).map(|i| first.offset(i)).collect(),
        columns: vec![vec![f64::NAN; n]; FEATURE_COUNT],
        missing: vec![vec![true; n]; FEATURE_COUNT],
    };
    for rec in load {
        let row = (rec.timestamp.0 - first.0) as usize;
        frame.set(row, Feature::Demand, Some(rec.demand_mw));
    }
    for (row, b) in &buckets {
        frame.set(*row, Feature::AirTemp, mean(&b.temp));
        frame.set(*row, Feature::FeelsLike, mean(&b.feels));
        frame.set(*row, Feature::Humidity, mean(&b.humidity));
        frame.set(*row, Feature::Wind, mean(&b.wind));
        frame.set(*row, Feature::Precip, mean(&b.precip));
        frame.set(*row, Feature::WxCode, mode_code(&b.codes));
    }
    frame.refresh_lag();
    encode_calendar(&mut frame, &BTreeSet::new());
    Ok(frame)
}
