// SPDX-License-Identifier: Apache-2.0

use super::{ErrorKind, PipelineError, RunConfig, Stage};
use crate::ingest::{AlignedFrame, Feature, FEATURE_COUNT};
use crate::synthetic::FileDigest;
use crate::time::Hour;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const META_FILE: &str = "meta.json";

/// What produced an artifact; embedded in every JSON and TOML artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    /// Stage config digest, hex sha256.
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Upstream stage name to its digest.
    pub upstream: BTreeMap<String, String>,
}

/// Contents of a stage's `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMeta {
    pub provenance: Provenance,
    /// Content digests of external input files, by role.
    pub inputs: Vec<FileDigest>,
    /// Content digests of the files this stage wrote.
    pub outputs: Vec<FileDigest>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl std::str::FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::new("config", ErrorKind::Config, format!("unknown stage `{s}`")))
    }
}

/// The config sections a stage reads.
fn sections(stage: Stage, cfg: &RunConfig) -> serde_json::Value {
    use crate::forecaster::BranchKind;
    let train = |kind: BranchKind| json!({ "branch": cfg.branch(kind), "train": cfg.train });
    match stage {
        Stage::Synth => json!(cfg.synth),
        Stage::Ingest => json!({ "split": cfg.split, "ingest": cfg.ingest }),
        Stage::Calibrate => json!(cfg.physics),
        Stage::TrainCnn => train(BranchKind::Cnn),
        Stage::TrainTransformer => train(BranchKind::Transformer),
        Stage::Fuse => serde_json::Value::Null,
        Stage::Evaluate => json!(cfg.hampel),
        Stage::Explain => json!({ "attribution": cfg.attribution, "hampel": cfg.hampel }),
        Stage::Ablate => json!({
            "cnn": cfg.cnn,
            "transformer": cfg.transformer,
            "train": cfg.train,
            "hampel": cfg.hampel,
            "ablation": cfg.ablation,
        }),
    }
}

pub(crate) fn seed_of(stage: Stage, cfg: &RunConfig) -> Option<u64> {
    match stage {
        Stage::Synth => Some(cfg.synth.seed),
        Stage::TrainCnn | Stage::TrainTransformer | Stage::Explain => Some(cfg.seed),
        _ => None,
    }
}

pub(crate) fn stage_digest(
    stage: Stage,
    cfg: &RunConfig,
    upstream: &BTreeMap<String, String>,
    inputs: &[FileDigest],
) -> String {
    let v = json!({
        "stage": stage.name(),
        "config": sections(stage, cfg),
        "seed": seed_of(stage, cfg),
        "upstream": upstream,
        "inputs": inputs,
    });
    sha256_hex(&serde_json::to_vec(&v).expect("config serializes"))
}

pub(crate) fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.dir())
}

pub(crate) fn read_meta(out: &Path, requester: Stage, stage: Stage) -> Result<StageMeta, PipelineError> {
    let path = stage_dir(out, stage).join(META_FILE);
    if !path.exists() {
        return Err(PipelineError::missing(requester, stage, &path));
    }
    let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(requester.name(), &path, &e))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        PipelineError::new(requester.name(), ErrorKind::Mismatch, format!("unreadable {stage} metadata: {e}"))
            .with("path", path.display())
    })
}

fn mismatch(requester: Stage, message: String, rerun: Stage) -> PipelineError {
    PipelineError::new(requester.name(), ErrorKind::Mismatch, format!("{message}; re-run `{}` or pass --force", rerun.command()))
        .with("producer", rerun.command())
}

/// Checks `meta` of `stage` against the current config and the digests of
/// its own upstream artifacts, recursively.
fn check_chain(out: &Path, requester: Stage, stage: Stage, meta: &StageMeta, cfg: &RunConfig, force: bool) -> Result<(), PipelineError> {
    let p = &meta.provenance;
    let expected = stage_digest(stage, cfg, &p.upstream, &meta.inputs);
    if expected != p.digest && !force {
        return Err(mismatch(requester, format!("{stage} artifacts were produced under a different configuration"), stage)
            .with("expected_digest", &expected)
            .with("found_digest", &p.digest));
    }
    for (name, digest) in &p.upstream {
        let up: Stage = name.parse()?;
        let up_meta = read_meta(out, requester, up)?;
        if &up_meta.provenance.digest != digest && !force {
            return Err(mismatch(requester, format!("{stage} artifacts were built from other {up} artifacts"), stage)
                .with("expected_digest", digest)
                .with("found_digest", &up_meta.provenance.digest));
        }
        check_chain(out, requester, up, &up_meta, cfg, force)?;
    }
    Ok(())
}

/// Verifies every stage `stage` depends on and returns their digests.
pub(crate) fn verify_upstream(out: &Path, stage: Stage, cfg: &RunConfig, force: bool) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut digests = BTreeMap::new();
    for up in stage.upstream(cfg) {
        let meta = read_meta(out, stage, up)?;
        check_chain(out, stage, up, &meta, cfg, force)?;
        digests.insert(up.name().to_string(), meta.provenance.digest);
    }
    Ok(digests)
}

/// Reads a file written by `producer`, checking it against the recorded digest.
pub(crate) fn read_output(out: &Path, requester: Stage, producer: Stage, file: &str) -> Result<Vec<u8>, PipelineError> {
    let meta = read_meta(out, requester, producer)?;
    let path = stage_dir(out, producer).join(file);
    let recorded = meta.outputs.iter().find(|f| f.file == file).ok_or_else(|| {
        PipelineError::new(requester.name(), ErrorKind::Dependency, format!("{producer} did not record `{file}`"))
            .with("producer", producer.command())
    })?;
    let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(requester.name(), &path, &e))?;
    if sha256_hex(&bytes) != recorded.sha256 {
        return Err(mismatch(requester, format!("{} was modified after {producer} wrote it", path.display()), producer));
    }
    Ok(bytes)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(
    out: &Path,
    requester: Stage,
    producer: Stage,
    file: &str,
) -> Result<T, PipelineError> {
    let bytes = read_output(out, requester, producer, file)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::new(requester.name(), ErrorKind::Mismatch, format!("unreadable {producer} artifact {file}: {e}")))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

/// Writes the stage's files and then its `meta.json`. The old metadata is
/// removed first so an interrupted run never looks complete.
pub(crate) fn write_stage(
    out: &Path,
    provenance: Provenance,
    inputs: Vec<FileDigest>,
    files: Vec<(String, Vec<u8>)>,
) -> Result<StageMeta, PipelineError> {
    let stage = provenance.stage;
    let dir = stage_dir(out, stage);
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(stage.name(), &dir, &e))?;
    let meta_path = dir.join(META_FILE);
    if meta_path.exists() {
        std::fs::remove_file(&meta_path).map_err(|e| PipelineError::io(stage.name(), &meta_path, &e))?;
    }
    let mut outputs = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(&name);
        std::fs::write(&path, &bytes).map_err(|e| PipelineError::io(stage.name(), &path, &e))?;
        outputs.push(FileDigest { file: name, sha256: sha256_hex(&bytes) });
    }
    let meta = StageMeta { provenance, inputs, outputs };
    std::fs::write(&meta_path, to_json(&meta)).map_err(|e| PipelineError::io(stage.name(), &meta_path, &e))?;
    Ok(meta)
}

/// `timestamp` plus one column per feature; missing cells are empty.
pub fn frame_to_csv(frame: &AlignedFrame) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestamp"];
    header.extend(Feature::ALL.iter().map(|f| f.name()));
    w.write_record(&header).expect("in-memory write");
    for r in 0..frame.len() {
        let mut rec = vec![frame.timestamps[r].to_string()];
        for f in Feature::ALL {
            rec.push(if frame.is_missing(r, f) { String::new() } else { frame.value(r, f).to_string() });
        }
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn frame_from_csv(bytes: &[u8]) -> Result<AlignedFrame, String> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    let mut expected = vec!["timestamp"];
    expected.extend(Feature::ALL.iter().map(|f| f.name()));
    if header.iter().ne(expected.iter().copied()) {
        return Err(format!("unexpected frame header {:?}", header.iter().collect::<Vec<_>>()));
    }
    let mut frame = AlignedFrame {
        timestamps: Vec::new(),
        columns: vec![Vec::new(); FEATURE_COUNT],
        missing: vec![Vec::new(); FEATURE_COUNT],
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let ts = Hour::parse(&rec[0]).map_err(|e| format!("row {}: {e}", line + 1))?;
        frame.timestamps.push(ts);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let (v, miss) = if field.is_empty() {
                (f64::NAN, true)
            } else {
                (field.parse::<f64>().map_err(|e| format!("row {}: {e}", line + 1))?, false)
            };
            frame.columns[j].push(v);
            frame.missing[j].push(miss);
        }
    }
    Ok(frame)
}
