// SPDX-License-Identifier: Apache-2.0

//! Stage-per-directory orchestration of the full workflow.
//!
//! Each stage writes its files under `<out>/<stage dir>/` together with a
//! `meta.json` recording the stage's config digest, seed, upstream digests
//! and the sha256 of every file it wrote. A stage digest hashes the config
//! sections the stage reads, its seed, its upstream digests and the content
//! digests of any external inputs, so it changes whenever anything that
//! could change its output changes. Downstream stages recompute the digests
//! of the whole upstream chain from the current config and refuse to run on
//! a mismatch unless forced.

mod artifact;
mod config;
mod stages;

pub use artifact::{frame_from_csv, frame_to_csv, Provenance, StageMeta, META_FILE};
pub use config::{
    AblationConfig, AttributionConfig, EnvelopeSource, IngestConfig, PathsConfig, PhysicsConfig, RunConfig,
    SplitConfig, TrainSection,
};
pub use stages::{
    load_calibration, load_checkpoint, load_fusion, load_prepared, read_artifact, run, score_test, train_member,
    AblationJson, AblationRun, AblationSummaryRow, CalibrationJson, CheckpointJson, EnsembleJson, ExplainImportance,
    IngestJson, MetricsJson, ModelImportance, ModelStability, Prepared, RampCount, RegimeComparisonJson, RunOptions,
    SegmentCounts, StabilityJson, TestScore, WindowCounts,
};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Ingest,
    Calibrate,
    TrainCnn,
    TrainTransformer,
    Fuse,
    Evaluate,
    Explain,
    Ablate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Calibrate,
        Stage::TrainCnn,
        Stage::TrainTransformer,
        Stage::Fuse,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Calibrate => "calibrate",
            Stage::TrainCnn => "train-cnn",
            Stage::TrainTransformer => "train-transformer",
            Stage::Fuse => "fuse",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Ablate => "ablate",
        }
    }

    /// Directory under the artifact root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::TrainCnn => "train/cnn",
            Stage::TrainTransformer => "train/transformer",
            s => s.name(),
        }
    }

    /// The command line that produces this stage's artifacts.
    pub fn command(self) -> &'static str {
        match self {
            Stage::TrainCnn => "gridcast train --branch cnn",
            Stage::TrainTransformer => "gridcast train --branch transformer",
            Stage::Synth => "gridcast synth",
            Stage::Ingest => "gridcast ingest",
            Stage::Calibrate => "gridcast calibrate",
            Stage::Fuse => "gridcast fuse",
            Stage::Evaluate => "gridcast evaluate",
            Stage::Explain => "gridcast explain",
            Stage::Ablate => "gridcast ablate",
        }
    }

    pub fn train(kind: crate::forecaster::BranchKind) -> Stage {
        match kind {
            crate::forecaster::BranchKind::Cnn => Stage::TrainCnn,
            crate::forecaster::BranchKind::Transformer => Stage::TrainTransformer,
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(self, cfg: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::Synth => vec![],
            Stage::Ingest if cfg.paths.load.is_none() || cfg.paths.weather.is_none() => vec![Stage::Synth],
            Stage::Ingest => vec![],
            Stage::Calibrate => vec![Stage::Ingest],
            Stage::TrainCnn | Stage::TrainTransformer | Stage::Ablate => vec![Stage::Ingest, Stage::Calibrate],
            Stage::Fuse => vec![Stage::TrainCnn, Stage::TrainTransformer],
            Stage::Evaluate | Stage::Explain => vec![Stage::Fuse],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Io,
    /// An upstream artifact is missing.
    Dependency,
    /// An upstream artifact was produced under another configuration or
    /// from older inputs.
    Mismatch,
    /// The data or a computation failed.
    Data,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Io => "io",
            ErrorKind::Dependency => "dependency",
            ErrorKind::Mismatch => "mismatch",
            ErrorKind::Data => "data",
        }
    }
}

/// Machine-readable failure: `{stage, message, context}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineError {
    pub stage: String,
    pub message: String,
    pub context: BTreeMap<String, String>,
    #[serde(skip)]
    pub kind: Option<ErrorKind>,
}

impl PipelineError {
    pub fn new(stage: &str, kind: ErrorKind, message: impl Into<String>) -> Self {
        let mut context = BTreeMap::new();
        context.insert("kind".to_string(), kind.name().to_string());
        PipelineError { stage: stage.to_string(), message: message.into(), context, kind: Some(kind) }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", ErrorKind::Config, message)
    }

    pub fn io(stage: &str, path: &Path, err: &dyn fmt::Display) -> Self {
        Self::new(stage, ErrorKind::Io, format!("{}: {err}", path.display())).with("path", path.display())
    }

    pub fn data(stage: Stage, err: impl fmt::Display) -> Self {
        Self::new(stage.name(), ErrorKind::Data, err.to_string())
    }

    pub fn missing(stage: Stage, upstream: Stage, path: &Path) -> Self {
        Self::new(
            stage.name(),
            ErrorKind::Dependency,
            format!("missing {} artifacts; run `{}` first", upstream, upstream.command()),
        )
        .with("requires", upstream.name())
        .with("producer", upstream.command())
        .with("path", path.display())
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.context.insert(key.to_string(), value.to_string());
        self
    }

    pub fn kind(&self) -> ErrorKind {
        self.kind.unwrap_or(ErrorKind::Data)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

