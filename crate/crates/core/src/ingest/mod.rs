// SPDX-License-Identifier: Apache-2.0

//! Load/weather ingestion: CSV parsing, hourly alignment, gap imputation,
//! calendar encoding, standardization and 24-hour windowing.
//!
//! File formats (version 1):
//!
//! * load CSV, header `timestamp_utc,demand_mw`
//! * weather CSV, header
//!   `station,timestamp_utc,temp_c,feels_like_c,humidity_pct,wind_ms,precip_mm,wx_code`,
//!   empty field = missing
//! * holiday file, one ISO date (`YYYY-MM-DD`) per line, `#` comments allowed
//!
//! Headers must match exactly; unknown headers are rejected.

mod align;
mod calendar;
mod impute;
mod parse;
mod standardize;
mod window;

pub use align::{align_hourly, AlignedFrame, REFERENCE_STATIONS};
pub use calendar::{encode_calendar, parse_holidays, read_holidays, us_federal_holidays};
pub use impute::{impute_linear, ImputationReport, Imputed, UnfilledRun, DEFAULT_MAX_GAP_HOURS};
pub use parse::{
    parse_load_csv, parse_weather_csv, read_load_csv, read_weather_csv, write_load_csv, write_weather_csv,
    RawLoadRecord, RawWeatherRecord, LOAD_HEADER, WEATHER_HEADER,
};
pub use standardize::{fit_standardizer, Standardizer};
pub use window::{make_windows, SplitSpec, SplitTag, WindowSet, WindowSplits, WINDOW_HOURS, WINDOW_LEN};

use crate::time::{Hour, TimeError};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Number of per-hour features fed to the networks.
pub const FEATURE_COUNT: usize = 13;

/// Column layout of [`AlignedFrame`] and of every window row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    Demand = 0,
    LagDemand24 = 1,
    AirTemp = 2,
    FeelsLike = 3,
    Humidity = 4,
    Wind = 5,
    Precip = 6,
    WxCode = 7,
    HourOfDay = 8,
    DayOfWeek = 9,
    Month = 10,
    Weekend = 11,
    Holiday = 12,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [
        Feature::Demand,
        Feature::LagDemand24,
        Feature::AirTemp,
        Feature::FeelsLike,
        Feature::Humidity,
        Feature::Wind,
        Feature::Precip,
        Feature::WxCode,
        Feature::HourOfDay,
        Feature::DayOfWeek,
        Feature::Month,
        Feature::Weekend,
        Feature::Holiday,
    ];

    /// Columns that are standardized. Weather codes and calendar indicators
    /// stay as plain integers.
    pub const CONTINUOUS: [Feature; 7] = [
        Feature::Demand,
        Feature::LagDemand24,
        Feature::AirTemp,
        Feature::FeelsLike,
        Feature::Humidity,
        Feature::Wind,
        Feature::Precip,
    ];

    /// Weather columns that are aggregated over stations and imputed.
    pub const WEATHER: [Feature; 6] = [
        Feature::AirTemp,
        Feature::FeelsLike,
        Feature::Humidity,
        Feature::Wind,
        Feature::Precip,
        Feature::WxCode,
    ];

    pub const CALENDAR: [Feature; 5] = [
        Feature::HourOfDay,
        Feature::DayOfWeek,
        Feature::Month,
        Feature::Weekend,
        Feature::Holiday,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Feature> {
        Feature::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Demand => "demand",
            Feature::LagDemand24 => "lag24_demand",
            Feature::AirTemp => "air_temp",
            Feature::FeelsLike => "feels_like",
            Feature::Humidity => "humidity",
            Feature::Wind => "wind",
            Feature::Precip => "precip",
            Feature::WxCode => "wx_code",
            Feature::HourOfDay => "hour_of_day",
            Feature::DayOfWeek => "day_of_week",
            Feature::Month => "month",
            Feature::Weekend => "weekend",
            Feature::Holiday => "holiday",
        }
    }

    pub fn is_continuous(self) -> bool {
        Feature::CONTINUOUS.contains(&self)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Present-weather categories and their integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeatherType {
    Clear = 0,
    Rain = 1,
    Snow = 2,
    Fog = 3,
    Thunderstorm = 4,
    Other = 5,
}

impl WeatherType {
    pub fn code(self) -> i64 {
        self as i64
    }

    pub fn from_code(code: i64) -> Option<WeatherType> {
        Some(match code {
            0 => WeatherType::Clear,
            1 => WeatherType::Rain,
            2 => WeatherType::Snow,
            3 => WeatherType::Fog,
            4 => WeatherType::Thunderstorm,
            5 => WeatherType::Other,
            _ => return None,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unexpected header {found:?}, expected {expected:?}")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: {timestamp} is out of order (previous {previous})")]
    Ordering { line: u64, timestamp: Hour, previous: Hour },
    #[error("line {line}: duplicate timestamp {timestamp}{}", station.as_ref().map(|s| format!(" for station {s}")).unwrap_or_default())]
    DuplicateTimestamp { line: u64, timestamp: Hour, station: Option<String> },
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("column `{0}` is entirely missing")]
    EntirelyMissing(Feature),
    #[error("column `{0}` has zero variance on the training split")]
    ZeroVariance(Feature),
    #[error("split {0} has no complete 25-hour span to form a window")]
    EmptyWindows(SplitTag),
    #[error("invalid split specification: {0}")]
    Split(String),
    #[error(transparent)]
    Time(#[from] TimeError),
}
