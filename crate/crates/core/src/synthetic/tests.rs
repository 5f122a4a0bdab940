// SPDX-License-Identifier: Apache-2.0

use super::*;
use crate::extreme_events::{hampel_flags, HampelConfig};
use crate::ingest::{align_hourly, impute_linear, parse_load_csv, parse_weather_csv, AlignedFrame, Feature};
use crate::physics::fit_envelope;
use std::collections::BTreeSet;

fn quiet(years: u32) -> SyntheticConfig {
    SyntheticConfig {
        years,
        diurnal_amplitude_mw: 0.0,
        weekly_amplitude_mw: 0.0,
        noise_std_mw: 0.0,
        events: Some(Vec::new()),
        ..SyntheticConfig::default()
    }
}

fn ingest(data: &SyntheticData) -> AlignedFrame {
    let load = parse_load_csv(&data.load_csv()[..]).unwrap();
    let weather = parse_weather_csv(&data.weather_csv()[..]).unwrap();
    let stations: BTreeSet<String> = REFERENCE_STATIONS.iter().map(|s| s.to_string()).collect();
    align_hourly(&load, &weather, &stations).unwrap()
}

#[test]
fn noiseless_demand_lies_on_the_envelope() {
    let cfg = quiet(1);
    let data = generate(&cfg).unwrap();
    let frame = ingest(&data);
    let temps = frame.column(Feature::AirTemp);
    let demand = frame.column(Feature::Demand);
    for (t, d) in temps.iter().zip(demand) {
        assert!((cfg.envelope.demand(*t) - d).abs() <= 5e-4, "{t} {d}");
    }
    let fit = fit_envelope(temps, demand, cfg.envelope.t0_c, false).unwrap().envelope;
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    for (got, want) in [(fit.heating, cfg.envelope.heating), (fit.cooling, cfg.envelope.cooling)] {
        assert!(rel(got.a, want.a) < 1e-6 && rel(got.b, want.b) < 1e-6 && rel(got.c, want.c) < 1e-6, "{got:?}");
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = generate(&SyntheticConfig { years: 1, ..Default::default() }).unwrap();
    let b = generate(&SyntheticConfig { years: 1, ..Default::default() }).unwrap();
    assert_eq!(a.load_csv(), b.load_csv());
    assert_eq!(a.weather_csv(), b.weather_csv());
    let c = generate(&SyntheticConfig { years: 1, seed: 1, ..Default::default() }).unwrap();
    assert_ne!(a.load_csv(), c.load_csv());
}

#[test]
fn round_trips_through_ingest_without_imputation() {
    let data = generate(&SyntheticConfig { years: 1, ..Default::default() }).unwrap();
    assert_eq!(data.load.len(), 8_760);
    assert_eq!(data.weather.len(), 3 * 8_760);
    let frame = ingest(&data);
    let imputed = impute_linear(&frame, 6).unwrap();
    assert_eq!(imputed.report.filled_cells, 0);
    // only the lag column of the first day lacks a value
    assert_eq!(frame.missing_count(), 24);
    for (row, r) in data.load.iter().enumerate() {
        assert_eq!(frame.value(row, Feature::Demand), r.demand_mw);
    }
}

#[test]
fn configured_gaps_appear_as_missing() {
    let data = generate(&SyntheticConfig { years: 1, missing_rate: 0.02, ..Default::default() }).unwrap();
    let blanks = data.weather.iter().filter(|w| w.air_temp_c.is_none()).count();
    assert!(blanks > 0);
}

#[test]
fn scheduled_cold_snaps_are_flagged() {
    let cfg = SyntheticConfig::default();
    let data = generate(&cfg).unwrap();
    let demand: Vec<f64> = data.load.iter().map(|r| r.demand_mw).collect();
    let flags = hampel_flags(&demand, &HampelConfig::default()).unwrap();
    let start = cfg.range().start;
    for e in cfg.events().iter().filter(|e| e.temp_offset_c < 0.0) {
        let r = e.range();
        let missed: Vec<Hour> = (r.start.0..r.end.0)
            .map(Hour)
            .filter(|h| !flags[(h.0 - start.0) as usize])
            .collect();
        assert!(missed.is_empty(), "event at {}: unflagged {missed:?}", e.start);
    }
}

#[test]
fn event_offsets_taper_in_and_out() {
    let e = default_events(2018, 1)[0];
    let r = e.range();
    assert_eq!(e.strength(r.start), 1.0);
    assert_eq!(e.strength(Hour(r.end.0 - 1)), 1.0);
    assert_eq!(e.strength(Hour(r.start.0 - 13)), 0.0);
    assert_eq!(e.strength(Hour(r.end.0 + 12)), 0.0);
    let profile: Vec<f64> = (r.start.0 - 14..r.end.0 + 14).map(|h| e.strength(Hour(h))).collect();
    let step = profile.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    assert!((step - 1.0 / 13.0).abs() < 1e-12, "{step}");

    // no one-hour temperature jump anywhere near the event
    let cfg = SyntheticConfig { years: 1, climate: Climate { noise_std_c: 0.0, station_noise_c: 0.0, ..Climate::default() }, ..quiet(1) };
    let cfg = SyntheticConfig { events: Some(vec![e]), ..cfg };
    let data = generate(&cfg).unwrap();
    let temps: Vec<f64> = data.weather.iter().filter(|w| w.station_id == REFERENCE_STATIONS[0]).map(|w| w.air_temp_c.unwrap()).collect();
    let max_step = temps.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    assert!(max_step < 3.0, "{max_step}");
}

#[test]
fn clipping_is_reported() {
    let data = generate(&SyntheticConfig { years: 1, noise_std_mw: 20_000.0, ..Default::default() }).unwrap();
    assert!(data.report.clipped_low > 0 && data.report.clipped_high > 0);
    assert!(data.load.iter().all(|r| (DEMAND_RANGE_MW.0..=DEMAND_RANGE_MW.1).contains(&r.demand_mw)));
    let calm = generate(&quiet(1)).unwrap();
    assert_eq!(calm.report.clipped_low + calm.report.clipped_high, 0);
}

#[test]
fn invalid_config() {
    assert!(generate(&SyntheticConfig { years: 0, ..Default::default() }).is_err());
    assert!(generate(&SyntheticConfig { missing_rate: 1.0, ..Default::default() }).is_err());
}

#[test]
fn manifest_digests_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { years: 1, ..Default::default() };
    let data = generate(&cfg).unwrap();
    let manifest = data.write_dir(&cfg, dir.path()).unwrap();
    for f in &manifest.files {
        let bytes = std::fs::read(dir.path().join(&f.file)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256);
    }
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let back: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, manifest);
    let holidays = crate::ingest::read_holidays(&dir.path().join(HOLIDAYS_FILE)).unwrap();
    assert!(holidays.contains(&NaiveDate::from_ymd_opt(2018, 7, 4).unwrap()));
}
