// SPDX-License-Identifier: Apache-2.0

//! Hour-resolution UTC timestamps.

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Whole hours since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Hour(pub i64);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TimeError {
    #[error("unparseable timestamp `{0}`")]
    Unparseable(String),
    #[error("timestamp `{0}` is not on the hour")]
    NotOnHour(String),
}

impl Hour {
    pub fn from_datetime(dt: DateTime<Utc>) -> Result<Self, TimeError> {
        if dt.minute() != 0 || dt.second() != 0 || dt.nanosecond() != 0 {
            return Err(TimeError::NotOnHour(dt.to_rfc3339()));
        }
        Ok(Hour(dt.timestamp().div_euclid(3600)))
    }

    pub fn from_ymdh(year: i32, month: u32, day: u32, hour: u32) -> Option<Self> {
        let dt = Utc.with_ymd_and_hms(year, month, day, hour, 0, 0).single()?;
        Some(Hour(dt.timestamp() / 3600))
    }

    /// Accepts RFC 3339 (`2024-01-06T03:00:00Z`) and the naive forms
    /// `2024-01-06T03:00:00`, `2024-01-06 03:00:00`, `2024-01-06T03:00`.
    pub fn parse(s: &str) -> Result<Self, TimeError> {
        let s = s.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Hour::from_datetime(dt.with_timezone(&Utc));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
            if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
                return Hour::from_datetime(naive.and_utc());
            }
        }
        Err(TimeError::Unparseable(s.to_string()))
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.0 * 3600, 0).expect("hour index within chrono range")
    }

    pub fn date(self) -> NaiveDate {
        self.to_datetime().date_naive()
    }

    pub fn hour_of_day(self) -> u32 {
        self.0.rem_euclid(24) as u32
    }

    /// ISO weekday, Monday = 1 ... Sunday = 7.
    pub fn day_of_week(self) -> u32 {
        self.to_datetime().weekday().number_from_monday()
    }

    pub fn month(self) -> u32 {
        self.to_datetime().month()
    }

    pub fn day_of_year(self) -> u32 {
        self.to_datetime().ordinal()
    }

    pub fn offset(self, hours: i64) -> Hour {
        Hour(self.0 + hours)
    }
}

impl fmt::Display for Hour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:%SZ"))
    }
}

/// Half-open interval `[start, end)` of hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HourRange {
    pub start: Hour,
    pub end: Hour,
}

impl HourRange {
    pub fn new(start: Hour, end: Hour) -> Self {
        HourRange { start, end }
    }

    pub fn contains(&self, h: Hour) -> bool {
        self.start <= h && h < self.end
    }

    pub fn len(&self) -> i64 {
        (self.end.0 - self.start.0).max(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
