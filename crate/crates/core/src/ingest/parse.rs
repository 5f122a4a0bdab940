// SPDX-License-Identifier: Apache-2.0

use super::{IngestError, WeatherType};
use crate::time::Hour;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const LOAD_HEADER: [&str; 2] = ["timestamp_utc", "demand_mw"];
pub const WEATHER_HEADER: [&str; 8] = [
    "station",
    "timestamp_utc",
    "temp_c",
    "feels_like_c",
    "humidity_pct",
    "wind_ms",
    "precip_mm",
    "wx_code",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawLoadRecord {
    pub timestamp: Hour,
    pub demand_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawWeatherRecord {
    pub station_id: String,
    pub timestamp: Hour,
    pub air_temp_c: Option<f64>,
    pub feels_like_c: Option<f64>,
    pub humidity_pct: Option<f64>,
    pub wind_ms: Option<f64>,
    pub precip_mm: Option<f64>,
    pub wx_code: Option<i64>,
}

fn open(path: &Path) -> Result<std::fs::File, IngestError> {
    std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_load_csv(path: &Path) -> Result<Vec<RawLoadRecord>, IngestError> {
    parse_load_csv(open(path)?)
}

pub fn read_weather_csv(path: &Path) -> Result<Vec<RawWeatherRecord>, IngestError> {
    parse_weather_csv(open(path)?)
}

fn reader<R: Read>(input: R, expected: &[&str]) -> Result<csv::Reader<R>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = rdr.headers().map_err(|e| IngestError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let found: Vec<&str> = header.iter().collect();
    if found != expected {
        return Err(IngestError::Header {
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(rdr)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_err(line: u64, message: impl Into<String>) -> IngestError {
    IngestError::Parse {
        line,
        message: message.into(),
    }
}

fn timestamp(field: &str, line: u64) -> Result<Hour, IngestError> {
    Hour::parse(field).map_err(|e| parse_err(line, e.to_string()))
}

fn optional_real(field: &str, name: &str, line: u64) -> Result<Option<f64>, IngestError> {
    if field.is_empty() {
        return Ok(None);
    }
    let v: f64 = field
        .parse()
        .map_err(|_| parse_err(line, format!("{name}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{name}: non-finite value")));
    }
    Ok(Some(v))
}

/// Parses a load CSV. Rows must be strictly increasing in time.
pub fn parse_load_csv<R: Read>(input: R) -> Result<Vec<RawLoadRecord>, IngestError> {
    let mut rdr = reader(input, &LOAD_HEADER)?;
    let mut out: Vec<RawLoadRecord> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = line_of(&rec);
        let ts = timestamp(&rec[0], line)?;
        let demand = optional_real(&rec[1], "demand_mw", line)?
            .ok_or_else(|| parse_err(line, "demand_mw is empty"))?;
        if demand <= 0.0 {
            return Err(parse_err(line, format!("demand_mw must be positive, got {demand}")));
        }
        if let Some(prev) = out.last() {
            if ts == prev.timestamp {
                return Err(IngestError::DuplicateTimestamp {
                    line,
                    timestamp: ts,
                    station: None,
                });
            }
            if ts < prev.timestamp {
                return Err(IngestError::Ordering {
                    line,
                    timestamp: ts,
                    previous: prev.timestamp,
                });
            }
        }
        out.push(RawLoadRecord {
            timestamp: ts,
            demand_mw: demand,
        });
    }
    Ok(out)
}

/// Parses a weather CSV. Stations may interleave, but each station's rows
/// must be strictly increasing in time.
pub fn parse_weather_csv<R: Read>(input: R) -> Result<Vec<RawWeatherRecord>, IngestError> {
    let mut rdr = reader(input, &WEATHER_HEADER)?;
    let mut last_seen: HashMap<String, Hour> = HashMap::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = line_of(&rec);
        let station = rec[0].to_string();
        if station.is_empty() {
            return Err(parse_err(line, "station is empty"));
        }
        let ts = timestamp(&rec[1], line)?;
        let air_temp_c = optional_real(&rec[2], "temp_c", line)?;
        let feels_like_c = optional_real(&rec[3], "feels_like_c", line)?;
        let humidity_pct = optional_real(&rec[4], "humidity_pct", line)?;
        let wind_ms = optional_real(&rec[5], "wind_ms", line)?;
        let precip_mm = optional_real(&rec[6], "precip_mm", line)?;
        let wx_code = match &rec[7] {
            "" => None,
            s => {
                let code: i64 = s
                    .parse()
                    .map_err(|_| parse_err(line, format!("wx_code: `{s}` is not an integer")))?;
                if WeatherType::from_code(code).is_none() {
                    return Err(parse_err(line, format!("wx_code: unknown code {code}")));
                }
                Some(code)
            }
        };
        if let Some(h) = humidity_pct {
            if !(0.0..=100.0).contains(&h) {
                return Err(parse_err(line, format!("humidity_pct {h} outside [0, 100]")));
            }
        }
        if matches!(wind_ms, Some(w) if w < 0.0) {
            return Err(parse_err(line, "wind_ms must be non-negative"));
        }
        if matches!(precip_mm, Some(p) if p < 0.0) {
            return Err(parse_err(line, "precip_mm must be non-negative"));
        }
        if let Some(prev) = last_seen.get(&station) {
            if ts == *prev {
                return Err(IngestError::DuplicateTimestamp {
                    line,
                    timestamp: ts,
                    station: Some(station),
                });
            }
            if ts < *prev {
                return Err(IngestError::Ordering {
                    line,
                    timestamp: ts,
                    previous: *prev,
                });
            }
        }
        last_seen.insert(station.clone(), ts);
        out.push(RawWeatherRecord {
            station_id: station,
            timestamp: ts,
            air_temp_c,
            feels_like_c,
            humidity_pct,
            wind_ms,
            precip_mm,
            wx_code,
        });
    }
    Ok(out)
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records in the load CSV format. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_load_csv<W: Write>(records: &[RawLoadRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOAD_HEADER)?;
    for r in records {
        w.write_record([r.timestamp.to_string(), r.demand_mw.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes records in the weather CSV format; missing values become empty fields.
pub fn write_weather_csv<W: Write>(records: &[RawWeatherRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WEATHER_HEADER)?;
    for r in records {
        w.write_record([
            r.station_id.clone(),
            r.timestamp.to_string(),
            opt(r.air_temp_c),
            opt(r.feels_like_c),
            opt(r.humidity_pct),
            opt(r.wind_ms),
            opt(r.precip_mm),
            opt(r.wx_code),
        ])?;
    }
    w.flush()?;
    Ok(())
}
