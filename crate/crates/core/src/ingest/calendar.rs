// SPDX-License-Identifier: Apache-2.0

use super::{AlignedFrame, Feature, IngestError};
use chrono::{Datelike, NaiveDate, Weekday};
use std::collections::BTreeSet;
use std::path::Path;

/// Writes hour-of-day (0-23), ISO day-of-week (1-7), month (1-12), weekend
/// and holiday flags for every row.
pub fn encode_calendar(frame: &mut AlignedFrame, holidays: &BTreeSet<NaiveDate>) {
    for row in 0..frame.len() {
        let h = frame.timestamps[row];
        let dow = h.day_of_week();
        frame.set(row, Feature::HourOfDay, Some(h.hour_of_day() as f64));
        frame.set(row, Feature::DayOfWeek, Some(dow as f64));
        frame.set(row, Feature::Month, Some(h.month() as f64));
        frame.set(row, Feature::Weekend, Some(if dow >= 6 { 1.0 } else { 0.0 }));
        let holiday = holidays.contains(&h.date());
        frame.set(row, Feature::Holiday, Some(if holiday { 1.0 } else { 0.0 }));
    }
}

fn nth_weekday(year: i32, month: u32, weekday: Weekday, n: u8) -> NaiveDate {
    NaiveDate::from_weekday_of_month_opt(year, month, weekday, n).expect("valid nth weekday")
}

fn last_weekday(year: i32, month: u32, weekday: Weekday) -> NaiveDate {
    let next_month = if month == 12 {
        NaiveDate::from_ymd_opt(year + 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(year, month + 1, 1)
    }
    .expect("valid date");
    let mut d = next_month.pred_opt().expect("valid date");
    while d.weekday() != weekday {
        d = d.pred_opt().expect("valid date");
    }
    d
}

/// U.S. federal holidays on their calendar dates (no weekend observance shift).
pub fn us_federal_holidays(year: i32) -> Vec<NaiveDate> {
    let ymd = |m, d| NaiveDate::from_ymd_opt(year, m, d).expect("valid date");
    let mut days = vec![
        ymd(1, 1),
        nth_weekday(year, 1, Weekday::Mon, 3),
        nth_weekday(year, 2, Weekday::Mon, 3),
        last_weekday(year, 5, Weekday::Mon),
        ymd(7, 4),
        nth_weekday(year, 9, Weekday::Mon, 1),
        nth_weekday(year, 10, Weekday::Mon, 2),
        ymd(11, 11),
        nth_weekday(year, 11, Weekday::Thu, 4),
        ymd(12, 25),
    ];
    if year >= 2021 {
        days.push(ymd(6, 19));
    }
    days.sort();
    days
}

/// Reads a holiday file: one ISO date per line, blank lines and `#` comments ignored.
pub fn read_holidays(path: &Path) -> Result<BTreeSet<NaiveDate>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_holidays(&text)
}

/// Parses holiday-file text; see [`read_holidays`].
pub fn parse_holidays(text: &str) -> Result<BTreeSet<NaiveDate>, IngestError> {
    let mut out = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let d = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|e| IngestError::Parse {
            line: i as u64 + 1,
            message: format!("holiday `{line}`: {e}"),
        })?;
        out.insert(d);
    }
    Ok(out)
}
