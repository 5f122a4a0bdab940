// SPDX-License-Identifier: Apache-2.0

//! The CNN and Transformer forecasting branches and their training loop.
//!
//! Both branches read a standardized `24 x 13` window and emit a standardized
//! next-hour demand; [`TrainedBranch::predict`] maps that back to MW with the
//! shared input standardizer.

mod network;
mod train;

pub use network::{Branch, Tape};
pub use train::{
    train_branch, write_history_csv, BranchPredictor, EarlyStopping, EpochRecord, StopDecision, TrainedBranch,
};

use crate::nn::NnError;
use crate::physics::PhysicsError;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} window set is empty")]
    Empty(&'static str),
    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, term: &'static str },
    #[error("non-finite validation MAE at epoch {epoch}")]
    NonFiniteValidation { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Cnn,
    Transformer,
}

impl BranchKind {
    pub const ALL: [BranchKind; 2] = [BranchKind::Cnn, BranchKind::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Cnn => "cnn",
            BranchKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnBranchConfig {
    pub blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl Default for CnnBranchConfig {
    fn default() -> Self {
        CnnBranchConfig { blocks: 2, filters: 64, kernel: 3, embedding_dim: 64, dropout: 0.2, batch_norm: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerBranchConfig {
    pub d_model: usize,
    pub encoder_blocks: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
}

impl Default for TransformerBranchConfig {
    fn default() -> Self {
        TransformerBranchConfig { d_model: 64, encoder_blocks: 2, n_heads: 4, ff_dim: 128, embedding_dim: 64, dropout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BranchConfig {
    Cnn(CnnBranchConfig),
    Transformer(TransformerBranchConfig),
}

impl BranchConfig {
    pub fn kind(&self) -> BranchKind {
        match self {
            BranchConfig::Cnn(_) => BranchKind::Cnn,
            BranchConfig::Transformer(_) => BranchKind::Transformer,
        }
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: String| Err(ForecastError::Config(m));
        match self {
            BranchConfig::Cnn(c) => {
                if c.blocks == 0 || c.filters == 0 || c.embedding_dim == 0 {
                    return bad("cnn blocks, filters and embedding_dim must be positive".into());
                }
                if c.kernel == 0 || c.kernel % 2 == 0 {
                    return bad(format!("cnn kernel {} must be odd", c.kernel));
                }
                // each block halves the sequence
                if crate::ingest::WINDOW_HOURS >> c.blocks == 0 {
                    return bad(format!("{} conv blocks pool a 24-hour window to nothing", c.blocks));
                }
                check_dropout(c.dropout)
            }
            BranchConfig::Transformer(c) => {
                if c.d_model == 0 || c.n_heads == 0 || c.ff_dim == 0 || c.embedding_dim == 0 || c.encoder_blocks == 0 {
                    return bad("transformer dimensions must be positive".into());
                }
                if c.d_model % c.n_heads != 0 {
                    return bad(format!("d_model {} not divisible by {} heads", c.d_model, c.n_heads));
                }
                if c.d_model % 2 != 0 {
                    return bad(format!("d_model {} must be even for the positional encoding", c.d_model));
                }
                check_dropout(c.dropout)
            }
        }
    }
}

fn check_dropout(rate: f64) -> Result<(), ForecastError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(ForecastError::Config(format!("dropout {rate} outside [0, 1)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    /// Batches are built from contiguous runs of windows so the ramp term
    /// sees consecutive predictions; otherwise windows are shuffled individually.
    pub segment_batching: bool,
    /// Run length for segment batching; a batch holds `batch / segment_hours`
    /// randomly chosen runs.
    pub segment_hours: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 64,
            max_epochs: 100,
            patience: 10,
            lambda1: crate::physics::PhysicsLossConfig::DEFAULT_LAMBDA1,
            lambda2: crate::physics::PhysicsLossConfig::DEFAULT_LAMBDA2,
            seed: 0,
            segment_batching: true,
            segment_hours: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ForecastError::Config(format!("learning rate {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(ForecastError::Config("batch size must be positive".into()));
        }
        if self.segment_batching && !(2..=self.batch).contains(&self.segment_hours) {
            return Err(ForecastError::Config(format!(
                "segment_hours {} must be in [2, batch]",
                self.segment_hours
            )));
        }
        if self.patience >= self.max_epochs {
            return Err(ForecastError::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(ForecastError::Config("lambda weights must be non-negative".into()));
        }
        Ok(())
    }
}
