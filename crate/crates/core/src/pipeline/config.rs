// SPDX-License-Identifier: Apache-2.0

use super::PipelineError;
use crate::extreme_events::HampelConfig;
use crate::forecaster::{BranchConfig, BranchKind, CnnBranchConfig, TrainConfig, TransformerBranchConfig};
use crate::ingest::{SplitSpec, DEFAULT_MAX_GAP_HOURS, REFERENCE_STATIONS};
use crate::physics::{PhysicsLossConfig, DEFAULT_RAMP_PERCENTILE};
use crate::synthetic::SyntheticConfig;
use crate::time::{Hour, HourRange};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything a run needs, read from one TOML file.
///
/// Every section is optional; missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for branch initialization, batch order, dropout and attribution.
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SyntheticConfig,
    pub split: SplitConfig,
    pub ingest: IngestConfig,
    pub physics: PhysicsConfig,
    pub cnn: CnnBranchConfig,
    pub transformer: TransformerBranchConfig,
    pub train: TrainSection,
    pub hampel: HampelConfig,
    pub attribution: AttributionConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SyntheticConfig { years: 8, ..SyntheticConfig::default() },
            split: SplitConfig::default(),
            ingest: IngestConfig::default(),
            physics: PhysicsConfig::default(),
            cnn: CnnBranchConfig::default(),
            transformer: TransformerBranchConfig::default(),
            train: TrainSection::default(),
            hampel: HampelConfig::default(),
            attribution: AttributionConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Input files and the artifact root. Without `load`/`weather` the files
/// written by `synth` are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weather: Option<PathBuf>,
    /// One ISO date per line; without it the U.S. federal calendar is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holidays: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { load: None, weather: None, holidays: None, out: PathBuf::from("out") }
    }
}

/// Split boundaries as dates; each range starts at midnight UTC and is
/// half-open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_start: NaiveDate,
    pub val_start: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_start: date(2018, 1, 1),
            val_start: date(2023, 1, 1),
            test_start: date(2024, 1, 1),
            test_end: date(2026, 1, 1),
        }
    }
}

fn midnight(d: NaiveDate) -> Hour {
    Hour::from_datetime(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc()).expect("whole hour")
}

impl SplitConfig {
    pub fn spec(&self) -> Result<SplitSpec, PipelineError> {
        let [a, b, c, d] = [self.train_start, self.val_start, self.test_start, self.test_end].map(midnight);
        let spec = SplitSpec { train: HourRange::new(a, b), val: HourRange::new(b, c), test: HourRange::new(c, d) };
        spec.validate().map_err(|e| PipelineError::config(format!("split: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub stations: Vec<String>,
    pub max_gap_hours: usize,
    /// Give a constant continuous column std 1 instead of failing.
    pub unit_std_for_constant: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            stations: REFERENCE_STATIONS.iter().map(|s| s.to_string()).collect(),
            max_gap_hours: DEFAULT_MAX_GAP_HOURS,
            unit_std_for_constant: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeSource {
    /// Least-squares fit on the training range.
    Fit,
    /// The pre-calibrated ERCOT coefficients.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub envelope: EnvelopeSource,
    pub t0_c: f64,
    /// Fit both segments jointly so they meet at `t0_c`.
    pub continuous: bool,
    pub bin_width_c: f64,
    pub sigma_floor_mw: f64,
    pub ramp_percentile: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            envelope: EnvelopeSource::Fit,
            t0_c: 18.5,
            continuous: false,
            bin_width_c: 2.0,
            sigma_floor_mw: 1.0,
            ramp_percentile: DEFAULT_RAMP_PERCENTILE,
        }
    }
}

/// Optimizer and loss settings shared by both branches. The seed comes from
/// the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub segment_batching: bool,
    pub segment_hours: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch: t.batch,
            max_epochs: t.max_epochs,
            patience: t.patience,
            lambda1: PhysicsLossConfig::DEFAULT_LAMBDA1,
            lambda2: PhysicsLossConfig::DEFAULT_LAMBDA2,
            segment_batching: t.segment_batching,
            segment_hours: t.segment_hours,
        }
    }
}

impl TrainSection {
    pub fn with(&self, seed: u64, lambda1: f64, lambda2: f64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            lambda1,
            lambda2,
            seed,
            segment_batching: self.segment_batching,
            segment_hours: self.segment_hours,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Stratified background size for the sampled estimator.
    pub background_size: usize,
    /// Permutations per sample for the sampled estimator.
    pub permutations: usize,
    /// Test windows explained with the sampled estimator: half from flagged
    /// hours, the rest (and any shortfall) from normal hours.
    pub bulk_samples: usize,
    /// Target hours explained by exact enumeration. Empty picks
    /// `exact_event_count` flagged hours spread over the test range.
    pub events: Vec<String>,
    pub exact_event_count: usize,
    /// Background size for exact enumeration (8192 coalitions per window).
    pub exact_background_size: usize,
    pub bootstrap_resamples: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            background_size: 500,
            permutations: 200,
            bulk_samples: 200,
            events: Vec::new(),
            exact_event_count: 5,
            exact_background_size: 100,
            bootstrap_resamples: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// `(lambda1, lambda2)` cells; the first is the reference.
    pub grid: Vec<(f64, f64)>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { grid: crate::evaluation::AblationGrid::default().configs, seeds: vec![0, 1, 2] }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io("config", path, &e))?;
        Self::from_toml(&text)
    }

    pub fn branch(&self, kind: BranchKind) -> BranchConfig {
        match kind {
            BranchKind::Cnn => BranchConfig::Cnn(self.cnn.clone()),
            BranchKind::Transformer => BranchConfig::Transformer(self.transformer.clone()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.with(self.seed, self.train.lambda1, self.train.lambda2)
    }

    /// Checks every section that can be checked without data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::config(m));
        self.split.spec()?;
        if self.ingest.stations.is_empty() {
            return bad("ingest.stations is empty".into());
        }
        let p = &self.physics;
        if !(p.t0_c.is_finite() && p.bin_width_c > 0.0 && p.sigma_floor_mw > 0.0) {
            return bad("physics: t0_c must be finite, bin_width_c and sigma_floor_mw positive".into());
        }
        if !(0.0..=100.0).contains(&p.ramp_percentile) {
            return bad(format!("physics.ramp_percentile {} outside [0, 100]", p.ramp_percentile));
        }
        for kind in BranchKind::ALL {
            self.branch(kind).validate().map_err(|e| PipelineError::config(format!("{kind}: {e}")))?;
        }
        self.train_config().validate().map_err(|e| PipelineError::config(format!("train: {e}")))?;
        self.hampel.validate().map_err(|e| PipelineError::config(format!("hampel: {e}")))?;
        let a = &self.attribution;
        if a.background_size == 0 || a.exact_background_size == 0 || a.permutations == 0 {
            return bad("attribution sizes must be positive".into());
        }
        if a.bootstrap_resamples < 2 {
            return bad("attribution.bootstrap_resamples must be at least 2".into());
        }
        for e in &a.events {
            Hour::parse(e).map_err(|err| PipelineError::config(format!("attribution.events `{e}`: {err}")))?;
        }
        if self.ablation.grid.is_empty() || self.ablation.seeds.is_empty() {
            return bad("ablation grid and seeds must be non-empty".into());
        }
        if self.ablation.grid.iter().any(|&(a, b)| !(a >= 0.0 && b >= 0.0)) {
            return bad("ablation lambdas must be non-negative".into());
        }
        Ok(())
    }
}
