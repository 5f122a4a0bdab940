// SPDX-License-Identifier: Apache-2.0

use super::artifact::{
    frame_from_csv, frame_to_csv, read_json, read_output, seed_of, sha256_hex, stage_digest, to_json, verify_upstream,
    write_stage, Provenance, StageMeta,
};
use super::{EnvelopeSource, ErrorKind, PipelineError, RunConfig, Stage};
use crate::attribution::{
    decompose_all, global_importance, matrix_of, regime_comparison, stability_from_parts, stratified_background,
    write_attribution_csv, AttributionMatrix, Decomposition, Explanation, ImportanceRanking, Method, Model,
    RegimeComparisonRow, StabilityReport,
};
use crate::ensemble::{fuse as fit_fusion, predict_ensemble, EnsembleWeights, FusionReport};
use crate::evaluation::{evaluate_by_regime, ramp_violations, run_ablation, AblationGrid, AblationReport, CellOutcome, RegimeReports};
use crate::extreme_events::{label_test_targets, write_flags_csv, HampelConfig, Regime, RegimeLabels};
use crate::forecaster::{train_branch, write_history_csv, Branch, BranchConfig, BranchKind, ForecastError, TrainConfig, TrainedBranch};
use crate::ingest::{
    align_hourly, encode_calendar, fit_standardizer, impute_linear, make_windows, parse_holidays, parse_load_csv,
    parse_weather_csv, us_federal_holidays, AlignedFrame, Feature, ImputationReport, SplitSpec, Standardizer,
    WindowSet, WindowSplits,
};
use crate::physics::{fit_envelope, fit_tolerance, percentile, ParabolicEnvelope, PhysicsCalibration};
use crate::synthetic::{generate, FileDigest, HOLIDAYS_FILE, LOAD_FILE, WEATHER_FILE};
use crate::time::Hour;
use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

const FRAME_CSV: &str = "frame.csv";
const INGEST_JSON: &str = "ingest.json";
const PHYSICS_TOML: &str = "physics.toml";
const CHECKPOINT_JSON: &str = "checkpoint.json";
const HISTORY_CSV: &str = "history.csv";
const ENSEMBLE_JSON: &str = "ensemble.json";

// Offsets that keep the attribution random streams apart for one run seed.
const PERMUTATION_SEED_OFFSET: u64 = 1 << 20;
const BOOTSTRAP_SEED_OFFSET: u64 = 2 << 20;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Run even when upstream artifacts were produced under another config.
    pub force: bool,
}

fn provenance(stage: Stage, cfg: &RunConfig, upstream: BTreeMap<String, String>, inputs: &[FileDigest]) -> Provenance {
    Provenance { stage, digest: stage_digest(stage, cfg, &upstream, inputs), seed: seed_of(stage, cfg), upstream }
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out).expect("in-memory csv");
    out
}

/// Runs one stage and returns the metadata it wrote.
pub fn run(stage: Stage, cfg: &RunConfig, opts: &RunOptions) -> Result<StageMeta, PipelineError> {
    cfg.validate()?;
    let out = cfg.paths.out.as_path();
    match stage {
        Stage::Synth => synth(cfg, out),
        Stage::Ingest => ingest(cfg, out, opts),
        Stage::Calibrate => calibrate(cfg, out, opts),
        Stage::TrainCnn => train(cfg, out, opts, BranchKind::Cnn),
        Stage::TrainTransformer => train(cfg, out, opts, BranchKind::Transformer),
        Stage::Fuse => fuse(cfg, out, opts),
        Stage::Evaluate => evaluate(cfg, out, opts),
        Stage::Explain => explain(cfg, out, opts),
        Stage::Ablate => ablate(cfg, out, opts),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<StageMeta, PipelineError> {
    let data = generate(&cfg.synth).map_err(|e| PipelineError::data(Stage::Synth, e))?;
    let (_, files) = data.files(&cfg.synth);
    write_stage(out, provenance(Stage::Synth, cfg, BTreeMap::new(), &[]), Vec::new(), files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestJson {
    pub provenance: Provenance,
    pub rows: usize,
    pub first: String,
    pub last: String,
    pub holidays: usize,
    pub split: SplitSpec,
    pub standardizer: Standardizer,
    pub imputation: ImputationReport,
    pub windows: WindowCounts,
}

fn read_input(stage: Stage, path: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|e| PipelineError::io(stage.name(), path, &e))
}

fn ingest(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<StageMeta, PipelineError> {
    let stage = Stage::Ingest;
    let upstream = verify_upstream(out, stage, cfg, opts.force)?;
    let fail = |e: crate::ingest::IngestError| PipelineError::data(stage, e);
    let synthetic = !upstream.is_empty();
    let load_bytes = match (&cfg.paths.load, synthetic) {
        (Some(p), false) => read_input(stage, p)?,
        _ => read_output(out, stage, Stage::Synth, LOAD_FILE)?,
    };
    let weather_bytes = match (&cfg.paths.weather, synthetic) {
        (Some(p), false) => read_input(stage, p)?,
        _ => read_output(out, stage, Stage::Synth, WEATHER_FILE)?,
    };
    let holiday_bytes = match (&cfg.paths.holidays, synthetic) {
        (Some(p), _) => Some(read_input(stage, p)?),
        (None, true) => Some(read_output(out, stage, Stage::Synth, HOLIDAYS_FILE)?),
        (None, false) => None,
    };
    let mut inputs = vec![
        FileDigest { file: "load".into(), sha256: sha256_hex(&load_bytes) },
        FileDigest { file: "weather".into(), sha256: sha256_hex(&weather_bytes) },
    ];
    if let Some(b) = &holiday_bytes {
        inputs.push(FileDigest { file: "holidays".into(), sha256: sha256_hex(b) });
    }

    let load = parse_load_csv(&load_bytes[..]).map_err(|e| fail(e).with("file", "load"))?;
    let weather = parse_weather_csv(&weather_bytes[..]).map_err(|e| fail(e).with("file", "weather"))?;
    let stations: BTreeSet<String> = cfg.ingest.stations.iter().cloned().collect();
    let mut frame = align_hourly(&load, &weather, &stations).map_err(fail)?;
    let holidays: BTreeSet<NaiveDate> = match &holiday_bytes {
        Some(b) => parse_holidays(&String::from_utf8_lossy(b)).map_err(|e| fail(e).with("file", "holidays"))?,
        None => {
            let (a, b) = (frame.timestamps[0].date().year(), frame.timestamps[frame.len() - 1].date().year());
            (a..=b).flat_map(us_federal_holidays).collect()
        }
    };
    encode_calendar(&mut frame, &holidays);
    let imputed = impute_linear(&frame, cfg.ingest.max_gap_hours).map_err(fail)?;
    let split = cfg.split.spec()?;
    let standardizer = fit_standardizer(&imputed.frame, split.train, cfg.ingest.unit_std_for_constant).map_err(fail)?;
    let windows = make_windows(&imputed.frame, &standardizer, &split).map_err(fail)?;

    let prov = provenance(stage, cfg, upstream, &inputs);
    let info = IngestJson {
        provenance: prov.clone(),
        rows: imputed.frame.len(),
        first: imputed.frame.timestamps[0].to_string(),
        last: imputed.frame.timestamps[imputed.frame.len() - 1].to_string(),
        holidays: holidays.len(),
        split,
        standardizer,
        imputation: imputed.report,
        windows: WindowCounts { train: windows.train.len(), val: windows.val.len(), test: windows.test.len() },
    };
    let files = vec![(FRAME_CSV.to_string(), frame_to_csv(&imputed.frame)), (INGEST_JSON.to_string(), to_json(&info))];
    write_stage(out, prov, inputs, files)
}

/// The ingested frame with its split, standardizer and windows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub frame: AlignedFrame,
    pub split: SplitSpec,
    pub standardizer: Standardizer,
    pub windows: WindowSplits,
}

pub fn load_prepared(out: &Path, requester: Stage) -> Result<Prepared, PipelineError> {
    let info: IngestJson = read_json(out, requester, Stage::Ingest, INGEST_JSON)?;
    let bytes = read_output(out, requester, Stage::Ingest, FRAME_CSV)?;
    let frame = frame_from_csv(&bytes)
        .map_err(|e| PipelineError::new(requester.name(), ErrorKind::Mismatch, format!("unreadable frame: {e}")))?;
    let windows = make_windows(&frame, &info.standardizer, &info.split).map_err(|e| PipelineError::data(requester, e))?;
    Ok(Prepared { frame, split: info.split, standardizer: info.standardizer, windows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub heating: usize,
    pub cooling: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationJson {
    pub source: EnvelopeSource,
    pub points: SegmentCounts,
    /// `D(t0+) - D(t0-)`.
    pub jump_mw: f64,
    pub residual_rms_mw: f64,
    pub calibration: PhysicsCalibration,
    pub provenance: Provenance,
}

fn calibrate(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<StageMeta, PipelineError> {
    let stage = Stage::Calibrate;
    let upstream = verify_upstream(out, stage, cfg, opts.force)?;
    let prep = load_prepared(out, stage)?;
    let fail = |e: crate::physics::PhysicsError| PipelineError::data(stage, e);
    let f = &prep.frame;
    let in_train = |r: usize| prep.split.train.contains(f.timestamps[r]) && !f.is_missing(r, Feature::Demand);
    let rows: Vec<usize> = (0..f.len()).filter(|&r| in_train(r) && !f.is_missing(r, Feature::AirTemp)).collect();
    let temps: Vec<f64> = rows.iter().map(|&r| f.value(r, Feature::AirTemp)).collect();
    let demands: Vec<f64> = rows.iter().map(|&r| f.value(r, Feature::Demand)).collect();
    let p = &cfg.physics;
    let (envelope, residuals) = match p.envelope {
        EnvelopeSource::Fit => {
            let fit = fit_envelope(&temps, &demands, p.t0_c, p.continuous).map_err(fail)?;
            (fit.envelope, fit.residuals)
        }
        EnvelopeSource::Reference => {
            let env = ParabolicEnvelope::ERCOT;
            (env, temps.iter().zip(&demands).map(|(&t, &d)| d - env.demand(t)).collect())
        }
    };
    let tolerance = fit_tolerance(&temps, &residuals, p.bin_width_c, p.sigma_floor_mw).map_err(fail)?;
    let diffs: Vec<f64> = (1..f.len())
        .filter(|&r| in_train(r) && in_train(r - 1))
        .map(|r| (f.value(r, Feature::Demand) - f.value(r - 1, Feature::Demand)).abs())
        .collect();
    let delta_max_mw = percentile(&diffs, p.ramp_percentile)
        .filter(|d| *d > 0.0)
        .ok_or_else(|| PipelineError::data(stage, "training demand has no positive hour-over-hour change"))?;
    let heating = temps.iter().filter(|&&t| t < envelope.t0_c).count();
    let prov = provenance(stage, cfg, upstream, &[]);
    let doc = CalibrationJson {
        source: p.envelope,
        points: SegmentCounts { heating, cooling: temps.len() - heating },
        jump_mw: envelope.jump_at_breakpoint(),
        residual_rms_mw: (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt(),
        calibration: PhysicsCalibration { envelope, tolerance, delta_max_mw },
        provenance: prov.clone(),
    };
    let text = toml::to_string_pretty(&doc).map_err(|e| PipelineError::data(stage, e))?;
    write_stage(out, prov, Vec::new(), vec![(PHYSICS_TOML.to_string(), text.into_bytes())])
}

pub fn load_calibration(out: &Path, requester: Stage) -> Result<CalibrationJson, PipelineError> {
    let bytes = read_output(out, requester, Stage::Calibrate, PHYSICS_TOML)?;
    toml::from_str(&String::from_utf8_lossy(&bytes))
        .map_err(|e| PipelineError::new(requester.name(), ErrorKind::Mismatch, format!("unreadable physics calibration: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointJson {
    pub provenance: Provenance,
    pub branch: TrainedBranch,
}

/// Builds and trains one branch on the prepared windows.
pub fn train_member(
    prep: &Prepared,
    physics: &PhysicsCalibration,
    config: &BranchConfig,
    train: &TrainConfig,
) -> Result<TrainedBranch, ForecastError> {
    let branch = Branch::build(config, train.seed)?;
    train_branch(branch, &prep.windows.train, &prep.windows.val, &prep.standardizer, physics, train)
}

fn train(cfg: &RunConfig, out: &Path, opts: &RunOptions, kind: BranchKind) -> Result<StageMeta, PipelineError> {
    let stage = Stage::train(kind);
    let upstream = verify_upstream(out, stage, cfg, opts.force)?;
    let prep = load_prepared(out, stage)?;
    let cal = load_calibration(out, stage)?;
    let trained = train_member(&prep, &cal.calibration, &cfg.branch(kind), &cfg.train_config())
        .map_err(|e| PipelineError::data(stage, e))?;
    let history = csv_bytes(|w| write_history_csv(&trained.history, w));
    let prov = provenance(stage, cfg, upstream, &[]);
    let doc = CheckpointJson { provenance: prov.clone(), branch: trained };
    write_stage(out, prov, Vec::new(), vec![(CHECKPOINT_JSON.to_string(), to_json(&doc)), (HISTORY_CSV.to_string(), history)])
}

pub fn load_checkpoint(out: &Path, requester: Stage, kind: BranchKind) -> Result<TrainedBranch, PipelineError> {
    let doc: CheckpointJson = read_json(out, requester, Stage::train(kind), CHECKPOINT_JSON)?;
    Ok(doc.branch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleJson {
    pub provenance: Provenance,
    pub fusion: FusionReport,
    pub val_mae_cnn: f64,
    pub val_mae_transformer: f64,
    pub val_mae_ensemble: f64,
}

fn mae(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

fn predict(stage: Stage, b: &TrainedBranch, w: &WindowSet) -> Result<Vec<f64>, PipelineError> {
    b.predict(w).map_err(|e| PipelineError::data(stage, e).with("branch", b.kind))
}

fn fuse(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<StageMeta, PipelineError> {
    let stage = Stage::Fuse;
    let upstream = verify_upstream(out, stage, cfg, opts.force)?;
    let prep = load_prepared(out, stage)?;
    let cnn = load_checkpoint(out, stage, BranchKind::Cnn)?;
    let tr = load_checkpoint(out, stage, BranchKind::Transformer)?;
    let val = &prep.windows.val;
    let (pc, pt) = (predict(stage, &cnn, val)?, predict(stage, &tr, val)?);
    let fusion = fit_fusion(&val.targets_mw, &pc, &pt).map_err(|e| PipelineError::data(stage, e))?;
    let pe = predict_ensemble(&fusion.weights, &pc, &pt).map_err(|e| PipelineError::data(stage, e))?;
    let prov = provenance(stage, cfg, upstream, &[]);
    let doc = EnsembleJson {
        provenance: prov.clone(),
        val_mae_cnn: mae(&val.targets_mw, &pc),
        val_mae_transformer: mae(&val.targets_mw, &pt),
        val_mae_ensemble: mae(&val.targets_mw, &pe),
        fusion,
    };
    write_stage(out, prov, Vec::new(), vec![(ENSEMBLE_JSON.to_string(), to_json(&doc))])
}

pub fn load_fusion(out: &Path, requester: Stage) -> Result<EnsembleJson, PipelineError> {
    read_json(out, requester, Stage::Fuse, ENSEMBLE_JSON)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RampCount {
    pub model: String,
    /// Consecutive-hour prediction pairs with `|dy| > delta_max`.
    pub all: usize,
    /// The same, counting pairs whose later hour is flagged extreme.
    pub extreme: usize,
}

/// Test-set predictions and scores for the two branches, the ensemble and
/// the 24-hour persistence baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TestScore {
    pub labels: RegimeLabels,
    pub cnn: Vec<f64>,
    pub transformer: Vec<f64>,
    pub ensemble: Vec<f64>,
    /// In the order cnn, transformer, ensemble, persistence.
    pub reports: Vec<RegimeReports>,
    pub ramps: Vec<RampCount>,
}

impl TestScore {
    pub fn report(&self, model: &str) -> Option<&RegimeReports> {
        self.reports.iter().find(|r| r.all.model == model)
    }
}

pub fn score_test(
    prep: &Prepared,
    cnn: &TrainedBranch,
    transformer: &TrainedBranch,
    weights: &EnsembleWeights,
    hampel: &HampelConfig,
    delta_max_mw: f64,
) -> Result<TestScore, String> {
    let test = &prep.windows.test;
    let labels = label_test_targets(&prep.frame, prep.split.test, test, hampel).map_err(|e| e.to_string())?;
    let pc = cnn.predict(test).map_err(|e| e.to_string())?;
    let pt = transformer.predict(test).map_err(|e| e.to_string())?;
    let pe = predict_ensemble(weights, &pc, &pt).map_err(|e| e.to_string())?;
    let y = &test.targets_mw;
    let mut reports = Vec::new();
    let mut ramps = Vec::new();
    for (model, pred) in [("cnn", &pc), ("transformer", &pt), ("ensemble", &pe), ("persistence", &test.persistence_mw)] {
        reports.push(evaluate_by_regime(model, y, pred, &labels.flags).map_err(|e| e.to_string())?);
        ramps.push(RampCount {
            model: model.to_string(),
            all: ramp_violations(pred, &test.target_timestamps, delta_max_mw, None),
            extreme: ramp_violations(pred, &test.target_timestamps, delta_max_mw, Some(&labels.flags)),
        });
    }
    Ok(TestScore { labels, cnn: pc, transformer: pt, ensemble: pe, reports, ramps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub provenance: Provenance,
    pub weights: EnsembleWeights,
    pub delta_max_mw: f64,
    pub extreme_hours: usize,
    pub normal_hours: usize,
    pub reports: Vec<RegimeReports>,
    pub ramp_violations: Vec<RampCount>,
}

fn evaluate(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<StageMeta, PipelineError> {
    let stage = Stage::Evaluate;
    let upstream = verify_upstream(out, stage, cfg, opts.force)?;
    let prep = load_prepared(out, stage)?;
    let cal = load_calibration(out, stage)?;
    let cnn = load_checkpoint(out, stage, BranchKind::Cnn)?;
    let tr = load_checkpoint(out, stage, BranchKind::Transformer)?;
    let weights = load_fusion(out, stage)?.fusion.weights;
    let delta = cal.calibration.delta_max_mw;
    let score = score_test(&prep, &cnn, &tr, &weights, &cfg.hampel, delta).map_err(|e| PipelineError::data(stage, e))?;
    let (extreme, normal) = score.labels.counts();
    let prov = provenance(stage, cfg, upstream, &[]);
    let doc = MetricsJson {
        provenance: prov.clone(),
        weights,
        delta_max_mw: delta,
        extreme_hours: extreme,
        normal_hours: normal,
        reports: score.reports.clone(),
        ramp_violations: score.ramps.clone(),
    };

    let mut metrics = csv::Writer::from_writer(Vec::new());
    for r in score.reports.iter().flat_map(|r| Regime::ALL.into_iter().filter_map(|g| r.get(g))) {
        metrics.serialize(r).expect("in-memory csv");
    }
    let metrics = metrics.into_inner().expect("in-memory csv");

    let test = &prep.windows.test;
    let mut preds = csv::Writer::from_writer(Vec::new());
    preds
        .write_record(["timestamp", "target_mw", "persistence_mw", "cnn_mw", "transformer_mw", "ensemble_mw", "extreme"])
        .expect("in-memory csv");
    for i in 0..test.len() {
        preds
            .write_record([
                test.target_timestamps[i].to_string(),
                test.targets_mw[i].to_string(),
                test.persistence_mw[i].to_string(),
                score.cnn[i].to_string(),
                score.transformer[i].to_string(),
                score.ensemble[i].to_string(),
                u8::from(score.labels.flags[i]).to_string(),
            ])
            .expect("in-memory csv");
    }
    let preds = preds.into_inner().expect("in-memory csv");
    let flags = csv_bytes(|w| write_flags_csv(&score.labels, w));
    let files = vec![
        ("metrics.json".to_string(), to_json(&doc)),
        ("metrics.csv".to_string(), metrics),
        ("predictions.csv".to_string(), preds),
        ("flags.csv".to_string(), flags),
    ];
    write_stage(out, prov, Vec::new(), files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelImportance {
    pub model: String,
    pub all: ImportanceRanking,
    pub extreme: Option<ImportanceRanking>,
    pub normal: Option<ImportanceRanking>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainImportance {
    pub provenance: Provenance,
    pub weights: EnsembleWeights,
    pub background_size: usize,
    pub exact_background_size: usize,
    pub permutations: usize,
    pub bulk_extreme: usize,
    pub bulk_normal: usize,
    pub events: Vec<String>,
    pub models: Vec<ModelImportance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStability {
    pub model: String,
    pub report: StabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityJson {
    pub provenance: Provenance,
    pub resamples: usize,
    pub samples: usize,
    pub models: Vec<ModelStability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeComparisonJson {
    pub provenance: Provenance,
    pub model: String,
    pub rows: Vec<RegimeComparisonRow>,
}

/// `k` items spread evenly over `items` (all of them when `k >= len`).
fn spread(items: &[usize], k: usize) -> Vec<usize> {
    if k >= items.len() {
        return items.to_vec();
    }
    (0..k).map(|j| items[((2 * j + 1) * items.len()) / (2 * k)]).collect()
}

fn matrices(
    names: [&str; 3],
    timestamps: &[Hour],
    parts: [&[Decomposition]; 3],
) -> Result<Vec<AttributionMatrix>, crate::attribution::AttributionError> {
    names
        .iter()
        .zip(parts)
        .map(|(name, p)| {
            let e: Vec<Explanation> = p.iter().map(Decomposition::explanation).collect();
            matrix_of(name, timestamps, &e)
        })
        .collect()
}

fn combine_all(
    a: &[Decomposition],
    b: &[Decomposition],
    w: &EnsembleWeights,
) -> Result<Vec<Decomposition>, crate::attribution::AttributionError> {
    a.iter().zip(b).map(|(x, y)| Decomposition::combine(x, y, w)).collect()
}

fn explain(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<StageMeta, PipelineError> {
    let stage = Stage::Explain;
    let upstream = verify_upstream(out, stage, cfg, opts.force)?;
    let fail = |e: crate::attribution::AttributionError| PipelineError::data(stage, e);
    let prep = load_prepared(out, stage)?;
    let cnn = load_checkpoint(out, stage, BranchKind::Cnn)?;
    let tr = load_checkpoint(out, stage, BranchKind::Transformer)?;
    let weights = load_fusion(out, stage)?.fusion.weights;
    let (pc, pt) = (
        cnn.predictor().map_err(|e| PipelineError::data(stage, e))?,
        tr.predictor().map_err(|e| PipelineError::data(stage, e))?,
    );
    let models: [&dyn Model; 2] = [&pc, &pt];
    let a = &cfg.attribution;
    let test = &prep.windows.test;
    let labels = label_test_targets(&prep.frame, prep.split.test, test, &cfg.hampel).map_err(|e| PipelineError::data(stage, e))?;
    let (flagged, normal): (Vec<usize>, Vec<usize>) = (0..test.len()).partition(|&i| labels.flags[i]);

    // bulk: sampled estimator over a regime-balanced subset
    let ext = spread(&flagged, a.bulk_samples / 2);
    let nor = spread(&normal, a.bulk_samples - ext.len());
    let mut bulk_idx: Vec<usize> = ext.iter().chain(&nor).copied().collect();
    bulk_idx.sort_unstable();
    let bulk = test.subset(&bulk_idx);
    let bulk_flags: Vec<bool> = bulk_idx.iter().map(|&i| labels.flags[i]).collect();
    let bg = stratified_background(&prep.windows.train, a.background_size, cfg.seed).map_err(fail)?;
    let method = Method::Sampled { permutations: a.permutations, seed: cfg.seed.wrapping_add(PERMUTATION_SEED_OFFSET) };
    let mut parts = Vec::new();
    for m in models {
        parts.push(decompose_all(m, &bulk, &bg, method).map_err(fail)?);
    }
    let ens_parts = combine_all(&parts[0], &parts[1], &weights).map_err(fail)?;
    let names = ["cnn", "transformer", "ensemble"];
    let bulk_m = matrices(names, &bulk.target_timestamps, [&parts[0], &parts[1], &ens_parts]).map_err(fail)?;

    // listed events: exact enumeration on a smaller background
    let event_idx: Vec<usize> = if a.events.is_empty() {
        spread(if flagged.is_empty() { &normal } else { &flagged }, a.exact_event_count)
    } else {
        a.events
            .iter()
            .map(|s| {
                let h = Hour::parse(s).map_err(|e| PipelineError::config(e.to_string()))?;
                test.target_timestamps.iter().position(|&t| t == h).ok_or_else(|| {
                    PipelineError::new(stage.name(), ErrorKind::Config, format!("event {s} is not a test target hour"))
                })
            })
            .collect::<Result<_, _>>()?
    };
    let events = test.subset(&event_idx);
    let exact_bg = stratified_background(&prep.windows.train, a.exact_background_size, cfg.seed).map_err(fail)?;
    let mut exact = Vec::new();
    for m in models {
        exact.push(decompose_all(m, &events, &exact_bg, Method::Exact).map_err(fail)?);
    }
    let ens_exact = combine_all(&exact[0], &exact[1], &weights).map_err(fail)?;
    let event_m = matrices(names, &events.target_timestamps, [&exact[0], &exact[1], &ens_exact]).map_err(fail)?;

    let prov = provenance(stage, cfg, upstream, &[]);
    let mut importance = Vec::new();
    for m in &bulk_m {
        let by = |g: Regime| global_importance(m, Some(&bulk_flags), g).ok();
        importance.push(ModelImportance {
            model: m.model.clone(),
            all: global_importance(m, Some(&bulk_flags), Regime::All).map_err(fail)?,
            extreme: by(Regime::Extreme),
            normal: by(Regime::Normal),
        });
    }
    let ens = &importance[2];
    let comparison = match (&ens.extreme, &ens.normal) {
        (Some(e), Some(n)) => regime_comparison(e, n).map_err(fail)?,
        _ => Vec::new(),
    };
    let mut cmp_csv = csv::Writer::from_writer(Vec::new());
    cmp_csv.write_record(["feature", "rank_normal", "rank_extreme", "ratio"]).expect("in-memory csv");
    for r in &comparison {
        let ratio = r.ratio.map(|v| v.to_string()).unwrap_or_default();
        cmp_csv
            .write_record([r.feature.clone(), r.rank_normal.to_string(), r.rank_extreme.to_string(), ratio])
            .expect("in-memory csv");
    }
    let mut stability = Vec::new();
    for (name, p) in names.iter().zip([&parts[0], &parts[1], &ens_parts]) {
        let report = stability_from_parts(p, bg.len(), a.bootstrap_resamples, cfg.seed.wrapping_add(BOOTSTRAP_SEED_OFFSET))
            .map_err(fail)?;
        stability.push(ModelStability { model: name.to_string(), report });
    }

    let imp_doc = ExplainImportance {
        provenance: prov.clone(),
        weights,
        background_size: bg.len(),
        exact_background_size: exact_bg.len(),
        permutations: a.permutations,
        bulk_extreme: ext.len(),
        bulk_normal: nor.len(),
        events: events.target_timestamps.iter().map(Hour::to_string).collect(),
        models: importance,
    };
    let stab_doc = StabilityJson { provenance: prov.clone(), resamples: a.bootstrap_resamples, samples: bulk.len(), models: stability };
    let cmp_doc = RegimeComparisonJson { provenance: prov.clone(), model: "ensemble".into(), rows: comparison };
    let refs = |ms: &[AttributionMatrix]| -> Vec<u8> {
        let r: Vec<&AttributionMatrix> = ms.iter().collect();
        csv_bytes(|w| write_attribution_csv(&r, w))
    };
    let files = vec![
        ("attribution.csv".to_string(), refs(&bulk_m)),
        ("events.csv".to_string(), refs(&event_m)),
        ("importance.json".to_string(), to_json(&imp_doc)),
        ("regime_comparison.json".to_string(), to_json(&cmp_doc)),
        ("regime_comparison.csv".to_string(), cmp_csv.into_inner().expect("in-memory csv")),
        ("stability.json".to_string(), to_json(&stab_doc)),
    ];
    write_stage(out, prov, Vec::new(), files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub report: AblationReport,
}

/// Per-cell aggregate over seeds that completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub completed_seeds: usize,
    pub mean_extreme_rmse_mw: Option<f64>,
    pub mean_test_mape_pct: Option<f64>,
    pub ramp_violations: usize,
    pub extreme_ramp_violations: usize,
    /// Mean extreme RMSE change against the reference cell, percent.
    pub delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationJson {
    pub provenance: Provenance,
    /// Digest of the ingested data the cells shared.
    pub data_digest: String,
    pub grid: Vec<(f64, f64)>,
    pub seeds: Vec<u64>,
    pub delta_max_mw: f64,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummaryRow>,
}

fn ablation_cell(
    prep: &Prepared,
    cal: &PhysicsCalibration,
    cfg: &RunConfig,
    seed: u64,
    lambda1: f64,
    lambda2: f64,
) -> Result<CellOutcome, String> {
    let tc = cfg.train.with(seed, lambda1, lambda2);
    let cnn = train_member(prep, cal, &cfg.branch(BranchKind::Cnn), &tc).map_err(|e| format!("cnn: {e}"))?;
    let tr = train_member(prep, cal, &cfg.branch(BranchKind::Transformer), &tc).map_err(|e| format!("transformer: {e}"))?;
    let val = &prep.windows.val;
    let (vc, vt) = (cnn.predict(val).map_err(|e| e.to_string())?, tr.predict(val).map_err(|e| e.to_string())?);
    let weights = fit_fusion(&val.targets_mw, &vc, &vt).map_err(|e| e.to_string())?.weights;
    let score = score_test(prep, &cnn, &tr, &weights, &cfg.hampel, cal.delta_max_mw)?;
    let ens = score.report("ensemble").ok_or("missing ensemble report")?;
    let extreme = ens.extreme.as_ref().ok_or("the test range has no flagged hours")?;
    let ramps = &score.ramps[2];
    Ok(CellOutcome {
        extreme_rmse_mw: extreme.rmse_mw,
        test_mape_pct: ens.all.mape_pct,
        ramp_violations: ramps.all,
        extreme_ramp_violations: ramps.extreme,
    })
}

fn summarize(grid: &[(f64, f64)], runs: &[AblationRun]) -> Vec<AblationSummaryRow> {
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut rows: Vec<AblationSummaryRow> = grid
        .iter()
        .map(|&(l1, l2)| {
            let done: Vec<&CellOutcome> =
                runs.iter().filter_map(|r| r.report.cell(l1, l2).and_then(|c| c.outcome.as_ref())).collect();
            let rmse: Vec<f64> = done.iter().map(|o| o.extreme_rmse_mw).collect();
            let mape: Vec<f64> = done.iter().map(|o| o.test_mape_pct).collect();
            AblationSummaryRow {
                lambda1: l1,
                lambda2: l2,
                completed_seeds: done.len(),
                mean_extreme_rmse_mw: mean(&rmse),
                mean_test_mape_pct: mean(&mape),
                ramp_violations: done.iter().map(|o| o.ramp_violations).sum(),
                extreme_ramp_violations: done.iter().map(|o| o.extreme_ramp_violations).sum(),
                delta_pct: None,
            }
        })
        .collect();
    if let Some(base) = rows.first().and_then(|r| r.mean_extreme_rmse_mw) {
        for r in &mut rows {
            r.delta_pct = r.mean_extreme_rmse_mw.map(|v| crate::evaluation::delta_pct(base, v));
        }
    }
    rows
}

fn ablate(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<StageMeta, PipelineError> {
    let stage = Stage::Ablate;
    let upstream = verify_upstream(out, stage, cfg, opts.force)?;
    let prep = load_prepared(out, stage)?;
    let cal = load_calibration(out, stage)?.calibration;
    let grid = AblationGrid { configs: cfg.ablation.grid.clone() };
    let runs: Vec<AblationRun> = cfg
        .ablation
        .seeds
        .iter()
        .map(|&seed| AblationRun { seed, report: run_ablation(&grid, |l1, l2| ablation_cell(&prep, &cal, cfg, seed, l1, l2)) })
        .collect();
    let summary = summarize(&grid.configs, &runs);

    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "seed",
        "lambda1",
        "lambda2",
        "extreme_rmse_mw",
        "test_mape_pct",
        "ramp_violations",
        "extreme_ramp_violations",
        "delta_pct",
        "error",
    ])
    .expect("in-memory csv");
    for run in &runs {
        for c in &run.report.cells {
            let o = c.outcome.as_ref();
            w.write_record([
                run.seed.to_string(),
                c.lambda1.to_string(),
                c.lambda2.to_string(),
                opt(o.map(|o| o.extreme_rmse_mw)),
                opt(o.map(|o| o.test_mape_pct)),
                o.map(|o| o.ramp_violations.to_string()).unwrap_or_default(),
                o.map(|o| o.extreme_ramp_violations.to_string()).unwrap_or_default(),
                opt(c.delta_pct),
                c.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory csv");
        }
    }
    for r in &summary {
        w.write_record([
            "mean".to_string(),
            r.lambda1.to_string(),
            r.lambda2.to_string(),
            opt(r.mean_extreme_rmse_mw),
            opt(r.mean_test_mape_pct),
            r.ramp_violations.to_string(),
            r.extreme_ramp_violations.to_string(),
            opt(r.delta_pct),
            String::new(),
        ])
        .expect("in-memory csv");
    }
    let prov = provenance(stage, cfg, upstream.clone(), &[]);
    let doc = AblationJson {
        provenance: prov.clone(),
        data_digest: upstream.get(Stage::Ingest.name()).cloned().unwrap_or_default(),
        grid: grid.configs.clone(),
        seeds: cfg.ablation.seeds.clone(),
        delta_max_mw: cal.delta_max_mw,
        runs,
        summary,
    };
    let files = vec![
        ("ablation.json".to_string(), to_json(&doc)),
        ("ablation.csv".to_string(), w.into_inner().expect("in-memory csv")),
    ];
    write_stage(out, prov, Vec::new(), files)
}

/// Reads back a finished stage's JSON artifact.
pub fn read_artifact<T: serde::de::DeserializeOwned>(cfg: &RunConfig, stage: Stage, file: &str) -> Result<T, PipelineError> {
    read_json(&cfg.paths.out, stage, stage, file)
}
