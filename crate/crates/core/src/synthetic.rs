// SPDX-License-Identifier: Apache-2.0

//! Synthetic hourly load and weather series generated around a parabolic
//! temperature-demand envelope.

use crate::ingest::{
    us_federal_holidays, write_load_csv, write_weather_csv, RawLoadRecord, RawWeatherRecord, WeatherType,
    REFERENCE_STATIONS,
};
use crate::physics::ParabolicEnvelope;
use crate::time::{Hour, HourRange};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

/// Demand range of the reference system; generated demand outside it is clipped.
pub const DEMAND_RANGE_MW: (f64, f64) = (29_360.0, 85_435.0);

/// Extra precipitation added during an event before its multiplier applies.
const EVENT_PRECIP_MM: f64 = 0.5;

pub const LOAD_FILE: &str = "load.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const HOLIDAYS_FILE: &str = "holidays.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("writing {path}: {message}")]
    Io { path: String, message: String },
}

/// A scheduled weather excursion. The full temperature offset applies over
/// [`ExtremeEvent::range`]; it builds up linearly over `ramp_hours` before the
/// start and decays over as many hours after the end. Wind and precipitation
/// multipliers apply inside the range only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtremeEvent {
    pub start: Hour,
    pub duration_hours: u32,
    pub temp_offset_c: f64,
    pub wind_multiplier: f64,
    pub precip_multiplier: f64,
    #[serde(default)]
    pub ramp_hours: u32,
}

impl ExtremeEvent {
    pub fn range(&self) -> HourRange {
        HourRange::new(self.start, self.start.offset(self.duration_hours as i64))
    }

    /// Fraction of the temperature offset in effect at `h`.
    pub fn strength(&self, h: Hour) -> f64 {
        let r = self.range();
        let ramp = self.ramp_hours as i64;
        let outside = if h < r.start { r.start.0 - h.0 } else if h >= r.end { h.0 - r.end.0 + 1 } else { 0 };
        if outside > ramp {
            0.0
        } else {
            1.0 - outside as f64 / (ramp + 1) as f64
        }
    }
}

/// Shape of the temperature process shared by all stations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Climate {
    pub annual_mean_c: f64,
    pub seasonal_amplitude_c: f64,
    pub diurnal_amplitude_c: f64,
    /// Marginal std of the AR(1) temperature anomaly.
    pub noise_std_c: f64,
    /// AR(1) coefficient of the hourly anomaly.
    pub persistence: f64,
    /// Std of independent per-station deviations.
    pub station_noise_c: f64,
}

impl Default for Climate {
    fn default() -> Self {
        Climate {
            annual_mean_c: 19.0,
            seasonal_amplitude_c: 8.5,
            diurnal_amplitude_c: 5.0,
            noise_std_c: 2.0,
            persistence: 0.97,
            station_noise_c: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub years: u32,
    pub start_year: i32,
    pub seed: u64,
    pub envelope: ParabolicEnvelope,
    pub diurnal_amplitude_mw: f64,
    /// Demand reduction on Saturdays and Sundays.
    pub weekly_amplitude_mw: f64,
    pub noise_std_mw: f64,
    pub climate: Climate,
    /// Probability that any single weather field is left blank.
    pub missing_rate: f64,
    /// Scheduled events; `None` uses [`default_events`] for the configured years.
    pub events: Option<Vec<ExtremeEvent>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            years: 2,
            start_year: 2018,
            seed: 0,
            envelope: ParabolicEnvelope::ERCOT,
            diurnal_amplitude_mw: 2_500.0,
            weekly_amplitude_mw: 2_000.0,
            noise_std_mw: 500.0,
            climate: Climate::default(),
            missing_rate: 0.0,
            events: None,
        }
    }
}

/// A winter cold snap, a summer heat wave and an early-winter cold snap in
/// every year.
pub fn default_events(start_year: i32, years: u32) -> Vec<ExtremeEvent> {
    let at = |y: i32, m: u32, d: u32| Hour::from_ymdh(y, m, d, 6).expect("valid date");
    (start_year..start_year + years as i32)
        .flat_map(|y| {
            [
                ExtremeEvent {
                    start: at(y, 1, 20),
                    duration_hours: 72,
                    temp_offset_c: -15.0,
                    wind_multiplier: 2.5,
                    precip_multiplier: 4.0,
                    ramp_hours: 12,
                },
                ExtremeEvent {
                    start: at(y, 8, 8),
                    duration_hours: 96,
                    temp_offset_c: 4.0,
                    wind_multiplier: 0.5,
                    precip_multiplier: 0.0,
                    ramp_hours: 12,
                },
                ExtremeEvent {
                    start: at(y, 12, 12),
                    duration_hours: 60,
                    temp_offset_c: -14.0,
                    wind_multiplier: 2.0,
                    precip_multiplier: 3.0,
                    ramp_hours: 12,
                },
            ]
        })
        .collect()
}

impl SyntheticConfig {
    pub fn events(&self) -> Vec<ExtremeEvent> {
        self.events.clone().unwrap_or_else(|| default_events(self.start_year, self.years))
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::Config(m.into()));
        if self.years < 1 {
            return bad("years must be at least 1");
        }
        if self.envelope.validate().is_err() {
            return bad("envelope is invalid");
        }
        if !(self.noise_std_mw >= 0.0) || !(self.climate.noise_std_c >= 0.0) || !(self.climate.station_noise_c >= 0.0) {
            return bad("noise std must be non-negative");
        }
        if !(0.0..1.0).contains(&self.climate.persistence) {
            return bad("persistence must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must be in [0, 1)");
        }
        if self.events().iter().any(|e| !(e.wind_multiplier >= 0.0) || !(e.precip_multiplier >= 0.0)) {
            return bad("event multipliers must be non-negative");
        }
        Ok(())
    }

    pub fn range(&self) -> HourRange {
        let start = Hour::from_ymdh(self.start_year, 1, 1, 0).expect("valid year");
        let end = Hour::from_ymdh(self.start_year + self.years as i32, 1, 1, 0).expect("valid year");
        HourRange::new(start, end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub hours: usize,
    pub event_hours: usize,
    pub clipped_low: usize,
    pub clipped_high: usize,
    pub demand_min_mw: f64,
    pub demand_max_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub load: Vec<RawLoadRecord>,
    pub weather: Vec<RawWeatherRecord>,
    pub holidays: Vec<NaiveDate>,
    pub report: GenerationReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

/// Generating parameters and output digests, written next to the CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SyntheticConfig,
    pub stations: Vec<String>,
    pub report: GenerationReport,
    pub files: Vec<FileDigest>,
}

fn round_to(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

/// Apparent temperature from air temperature, relative humidity and wind.
fn apparent_temp(t: f64, rh: f64, wind: f64) -> f64 {
    let vapour_hpa = rh / 100.0 * 6.105 * (17.27 * t / (237.7 + t)).exp();
    t + 0.33 * vapour_hpa - 0.70 * wind - 4.0
}

fn weather_code(t: f64, rh: f64, precip: f64) -> WeatherType {
    if precip > 0.0 {
        if t <= 0.0 {
            WeatherType::Snow
        } else if precip > 4.0 && t > 20.0 {
            WeatherType::Thunderstorm
        } else {
            WeatherType::Rain
        }
    } else if rh > 97.0 {
        WeatherType::Fog
    } else {
        WeatherType::Clear
    }
}

/// Generates the series.
///
/// Per hour: a common temperature (seasonal and diurnal cosines plus an AR(1)
/// anomaly, shifted by any active event) is perturbed per station; the demand
/// is `D(T) + diurnal + weekly + noise`, with `T` the station mean exactly as
/// ingest computes it from the written values.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData, SyntheticError> {
    cfg.validate()?;
    let range = cfg.range();
    let n = range.len() as usize;
    let c = &cfg.climate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let rain = Exp::new(1.0 / 1.5).expect("positive rate");
    let innovation = c.noise_std_c * (1.0 - c.persistence * c.persistence).sqrt();
    let offsets = [0.0, 0.6, -0.6];
    let events = cfg.events();

    let mut anomaly = c.noise_std_c * unit.sample(&mut rng);
    let mut load = Vec::with_capacity(n);
    let mut weather = Vec::with_capacity(3 * n);
    let mut report = GenerationReport {
        hours: n,
        event_hours: 0,
        clipped_low: 0,
        clipped_high: 0,
        demand_min_mw: f64::INFINITY,
        demand_max_mw: f64::NEG_INFINITY,
    };
    for i in 0..n {
        let h = range.start.offset(i as i64);
        let hod = h.hour_of_day() as f64;
        let doy = h.day_of_year() as f64;
        let event = events.iter().find(|e| e.range().contains(h));
        report.event_hours += event.is_some() as usize;
        let excursion: f64 = events.iter().map(|e| e.strength(h) * e.temp_offset_c).sum();

        let diurnal_phase = 2.0 * PI * (hod - 21.0) / 24.0;
        let base_t = c.annual_mean_c - c.seasonal_amplitude_c * (2.0 * PI * (doy - 15.0) / 365.25).cos()
            + c.diurnal_amplitude_c * diurnal_phase.cos()
            + anomaly
            + excursion;
        anomaly = c.persistence * anomaly + innovation * unit.sample(&mut rng);

        let mut temps = [0.0; 3];
        for (s, station) in REFERENCE_STATIONS.iter().enumerate() {
            let t = round_to(base_t + offsets[s] + c.station_noise_c * unit.sample(&mut rng), 1);
            temps[s] = t;
            let rh = (65.0 - 15.0 * diurnal_phase.cos() + 5.0 * unit.sample(&mut rng)).clamp(5.0, 100.0);
            let mut wind = 4.0 + 1.5 * unit.sample(&mut rng).abs();
            let mut precip = if rng.random_bool(0.04) { rain.sample(&mut rng) } else { 0.0 };
            if let Some(e) = event {
                wind *= e.wind_multiplier;
                precip = (precip + EVENT_PRECIP_MM) * e.precip_multiplier;
            }
            let rh = round_to(rh, 1);
            let wind = round_to(wind, 1);
            let precip = round_to(precip, 1);
            let mut field = |v: f64| (!rng.random_bool(cfg.missing_rate)).then_some(v);
            weather.push(RawWeatherRecord {
                station_id: station.to_string(),
                timestamp: h,
                air_temp_c: field(t),
                feels_like_c: field(round_to(apparent_temp(t, rh, wind), 1)),
                humidity_pct: field(rh),
                wind_ms: field(wind),
                precip_mm: field(precip),
                wx_code: field(0.0).map(|_| weather_code(t, rh, precip).code()),
            });
        }

        let t_mean = temps.iter().sum::<f64>() / temps.len() as f64;
        let weekend = matches!(h.day_of_week(), 6 | 7);
        let mut demand = cfg.envelope.demand(t_mean)
            + cfg.diurnal_amplitude_mw * (2.0 * PI * (hod - 23.0) / 24.0).cos()
            - if weekend { cfg.weekly_amplitude_mw } else { 0.0 }
            + cfg.noise_std_mw * unit.sample(&mut rng);
        if demand < DEMAND_RANGE_MW.0 {
            report.clipped_low += 1;
            demand = DEMAND_RANGE_MW.0;
        } else if demand > DEMAND_RANGE_MW.1 {
            report.clipped_high += 1;
            demand = DEMAND_RANGE_MW.1;
        }
        let demand = round_to(demand, 3);
        report.demand_min_mw = report.demand_min_mw.min(demand);
        report.demand_max_mw = report.demand_max_mw.max(demand);
        load.push(RawLoadRecord { timestamp: h, demand_mw: demand });
    }
    let holidays = (cfg.start_year..cfg.start_year + cfg.years as i32)
        .flat_map(us_federal_holidays)
        .collect();
    Ok(SyntheticData { load, weather, holidays, report })
}

impl SyntheticData {
    pub fn load_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_load_csv(&self.load, &mut out).expect("writing to memory");
        out
    }

    pub fn weather_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_weather_csv(&self.weather, &mut out).expect("writing to memory");
        out
    }

    pub fn holidays_text(&self) -> Vec<u8> {
        self.holidays.iter().map(|d| format!("{d}\n")).collect::<String>().into_bytes()
    }

    /// The CSVs, the holiday list and the manifest, as `(file name, bytes)`
    /// with the manifest last.
    pub fn files(&self, cfg: &SyntheticConfig) -> (Manifest, Vec<(String, Vec<u8>)>) {
        let mut files: Vec<(String, Vec<u8>)> = vec![
            (LOAD_FILE.to_string(), self.load_csv()),
            (WEATHER_FILE.to_string(), self.weather_csv()),
            (HOLIDAYS_FILE.to_string(), self.holidays_text()),
        ];
        let manifest = Manifest {
            config: cfg.clone(),
            stations: REFERENCE_STATIONS.iter().map(|s| s.to_string()).collect(),
            report: self.report.clone(),
            files: files
                .iter()
                .map(|(name, bytes)| FileDigest { file: name.clone(), sha256: hex::encode(Sha256::digest(bytes)) })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        files.push((MANIFEST_FILE.to_string(), json));
        (manifest, files)
    }

    /// Writes the CSVs, the holiday list and the manifest into `dir`.
    pub fn write_dir(&self, cfg: &SyntheticConfig, dir: &Path) -> Result<Manifest, SyntheticError> {
        let io = |path: &Path, e: std::io::Error| SyntheticError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let (manifest, files) = self.files(cfg);
        for (name, bytes) in files {
            let path = dir.join(name);
            std::fs::write(&path, &bytes).map_err(|e| io(&path, e))?;
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests;
