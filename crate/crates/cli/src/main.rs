// SPDX-License-Identifier: Apache-2.0

//! `gridcast`: run the forecasting pipeline one stage at a time.

use clap::{Parser, Subcommand, ValueEnum};
use gridcast::forecaster::BranchKind;
use gridcast::pipeline::{run, ErrorKind, PipelineError, RunConfig, RunOptions, Stage, StageMeta};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "gridcast", version, about = "Physics-informed short-term load forecasting")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the parabolic-envelope penalty weight.
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    /// Override the ramp penalty weight.
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// Override the artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run even if upstream artifacts came from a different configuration.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BranchArg {
    Cnn,
    Transformer,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic load and weather dataset.
    Synth,
    /// Parse, align, impute and encode the inputs.
    Ingest,
    /// Fit the temperature envelope, tolerance band and ramp limit.
    Calibrate,
    /// Train one or both branches.
    Train {
        #[arg(long, value_enum, default_value_t = BranchArg::Both)]
        branch: BranchArg,
    },
    /// Fit the ensemble weights on validation predictions.
    Fuse,
    /// Score every model on the test range, overall and by regime.
    Evaluate,
    /// Shapley attributions, regime comparison and bootstrap stability.
    Explain,
    /// Train and score the ensemble over the penalty-weight grid.
    Ablate,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Synth => vec![Stage::Synth],
            Command::Ingest => vec![Stage::Ingest],
            Command::Calibrate => vec![Stage::Calibrate],
            Command::Train { branch } => match branch {
                BranchArg::Cnn => vec![Stage::train(BranchKind::Cnn)],
                BranchArg::Transformer => vec![Stage::train(BranchKind::Transformer)],
                BranchArg::Both => BranchKind::ALL.into_iter().map(Stage::train).collect(),
            },
            Command::Fuse => vec![Stage::Fuse],
            Command::Evaluate => vec![Stage::Evaluate],
            Command::Explain => vec![Stage::Explain],
            Command::Ablate => vec![Stage::Ablate],
        }
    }
}

fn config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(l1) = cli.lambda1 {
        cfg.train.lambda1 = l1;
    }
    if let Some(l2) = cli.lambda2 {
        cfg.train.lambda2 = l2;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Vec<StageMeta>, PipelineError> {
    let cfg = config(cli)?;
    let opts = RunOptions { force: cli.force };
    cli.command.stages().into_iter().map(|stage| run(stage, &cfg, &opts)).collect()
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Data => 1,
        ErrorKind::Config => 2,
        ErrorKind::Dependency | ErrorKind::Mismatch => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(metas) => {
            for m in metas {
                let files: Vec<&str> = m.outputs.iter().map(|f| f.file.as_str()).collect();
                let line = serde_json::json!({
                    "stage": m.provenance.stage,
                    "digest": m.provenance.digest,
                    "dir": m.provenance.stage.dir(),
                    "files": files,
                });
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
