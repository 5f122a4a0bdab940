// SPDX-License-Identifier: Apache-2.0

use super::{Branch, BranchConfig, BranchKind, ForecastError, TrainConfig};
use crate::ingest::{Standardizer, WindowSet, WINDOW_LEN};
use crate::nn::{AdamState, ForwardCtx, ParameterSet};
use crate::physics::{composite_loss, PhysicsCalibration, PhysicsLossConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

// Independent RNG streams derived from the training seed; stream 0 is the
// parameter initialisation done by `Branch::build`.
const STREAM_ORDER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One row of the training history. Loss terms are sample-weighted means over
/// the epoch's batches, in MW^2; `val_mae` is in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub train_parabolic: f64,
    pub train_ramp: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a score where lower is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// A branch after training, holding the best-validation-epoch parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBranch {
    pub kind: BranchKind,
    pub config: BranchConfig,
    pub train_config: TrainConfig,
    pub params: ParameterSet,
    pub standardizer: Standardizer,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are stored.
    pub best_epoch: usize,
}

impl TrainedBranch {
    pub fn branch(&self) -> Result<Branch, ForecastError> {
        Branch::from_parts(&self.config, self.params.clone())
    }

    /// A reusable infer-mode model producing MW.
    pub fn predictor(&self) -> Result<BranchPredictor, ForecastError> {
        Ok(BranchPredictor {
            branch: self.branch()?,
            mean: self.standardizer.demand_mean(),
            std: self.standardizer.demand_std(),
        })
    }

    /// MW predictions for a flat batch of standardized windows.
    pub fn predict_inputs(&self, inputs: &[f64]) -> Result<Vec<f64>, ForecastError> {
        self.predictor()?.predict_inputs(inputs)
    }

    pub fn predict(&self, windows: &WindowSet) -> Result<Vec<f64>, ForecastError> {
        if windows.inputs.len() != windows.len() * WINDOW_LEN {
            return Err(ForecastError::Shape(format!(
                "{} input values for {} windows",
                windows.inputs.len(),
                windows.len()
            )));
        }
        self.predict_inputs(&windows.inputs)
    }

    pub fn best_val_mae(&self) -> Option<f64> {
        self.history.get(self.best_epoch.checked_sub(1)?).map(|r| r.val_mae)
    }
}

/// Infer-mode branch with the demand de-standardization attached.
#[derive(Debug, Clone)]
pub struct BranchPredictor {
    branch: Branch,
    mean: f64,
    std: f64,
}

impl BranchPredictor {
    pub fn predict_inputs(&self, inputs: &[f64]) -> Result<Vec<f64>, ForecastError> {
        Ok(self.branch.infer(inputs)?.into_iter().map(|z| self.mean + self.std * z).collect())
    }
}

/// Batches as index lists. Segment batching cuts the series into contiguous
/// runs at a random phase, shuffles the runs and packs them into batches.
fn epoch_batches(n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if !cfg.segment_batching {
        order.shuffle(rng);
        return order.chunks(cfg.batch).map(<[usize]>::to_vec).collect();
    }
    let run = cfg.segment_hours.min(n);
    let phase = rng.random_range(0..run);
    let mut cuts = vec![0];
    cuts.extend((phase..n).step_by(run).filter(|&c| c > 0));
    cuts.push(n);
    let mut runs: Vec<&[usize]> = cuts.windows(2).map(|w| &order[w[0]..w[1]]).collect();
    runs.shuffle(rng);
    let per_batch = (cfg.batch / run).max(1);
    runs.chunks(per_batch).map(|group| group.concat()).collect()
}

fn mean_abs_error(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / target.len() as f64
}

/// Trains `branch` with Adam on the composite loss.
///
/// Each batch is scored in MW: `L = MSE + lambda1 L_par + lambda2 L_ramp`
/// on de-standardized predictions `mean + std * z`. The optimizer sees
/// `L / std^2`, so the MSE term is the standardized-target MSE and the
/// physics terms keep their MW-space weighting relative to it. Validation
/// MAE is measured in MW after every epoch; the parameters of the best epoch
/// are restored at the end.
pub fn train_branch(
    mut branch: Branch,
    train: &WindowSet,
    val: &WindowSet,
    standardizer: &Standardizer,
    physics: &PhysicsCalibration,
    cfg: &TrainConfig,
) -> Result<TrainedBranch, ForecastError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ForecastError::Empty("training"));
    }
    if val.is_empty() {
        return Err(ForecastError::Empty("validation"));
    }
    let loss_cfg = PhysicsLossConfig::new(cfg.lambda1, cfg.lambda2, physics.delta_max_mw)?;
    let (mean, std) = (standardizer.demand_mean(), standardizer.demand_std());
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut dropout_rng = stream(cfg.seed, STREAM_DROPOUT);
    let mut adam = AdamState::with_lr(cfg.lr)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = branch.params.clone();
    let mut history = Vec::new();
    let mut inputs = Vec::with_capacity(cfg.batch * WINDOW_LEN);

    for epoch in 1..=cfg.max_epochs {
        let mut sums = [0.0; 4];
        for (b, idx) in epoch_batches(train.len(), cfg, &mut order_rng).iter().enumerate() {
            inputs.clear();
            for &i in idx {
                inputs.extend_from_slice(train.window(i));
            }
            let (z, tape) = branch.forward(&inputs, &mut ForwardCtx::train(&mut dropout_rng))?;
            let pred: Vec<f64> = z.iter().map(|v| mean + std * v).collect();
            let target: Vec<f64> = idx.iter().map(|&i| train.targets_mw[i]).collect();
            let temp: Vec<f64> = idx.iter().map(|&i| train.target_air_temp_c[i]).collect();
            let pairs: Vec<(usize, usize)> = (1..idx.len())
                .filter(|&k| train.target_timestamps[idx[k]].0 - train.target_timestamps[idx[k - 1]].0 == 1)
                .map(|k| (k - 1, k))
                .collect();
            let loss = composite_loss(&pred, &target, &temp, &pairs, &physics.envelope, &physics.tolerance, &loss_cfg);
            if let Some(term) = loss.non_finite_term() {
                return Err(ForecastError::NonFinite { epoch, batch: b + 1, term });
            }
            // d(L / std^2)/dz = (dL/dpred) * std / std^2
            let grad: Vec<f64> = loss.grad.iter().map(|g| g / std).collect();
            branch.params.zero_grads();
            branch.backward(&tape, &grad)?;
            branch.update_running(&tape)?;
            adam.step(&mut branch.params)?;
            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([loss.total, loss.mse, loss.parabolic, loss.ramp]) {
                *s += w * v;
            }
        }
        let n = train.len() as f64;
        let val_pred: Vec<f64> = branch.infer(&val.inputs)?.into_iter().map(|z| mean + std * z).collect();
        let val_mae = mean_abs_error(&val_pred, &val.targets_mw);
        if !val_mae.is_finite() {
            return Err(ForecastError::NonFiniteValidation { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: sums[0] / n,
            train_mse: sums[1] / n,
            train_parabolic: sums[2] / n,
            train_ramp: sums[3] / n,
            val_mae,
        });
        match stopper.observe(epoch, val_mae) {
            StopDecision::Improved => best = branch.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let mut params = best;
    params.reset_grads();
    Ok(TrainedBranch {
        kind: branch.config.kind(),
        config: branch.config.clone(),
        train_config: cfg.clone(),
        params,
        standardizer: standardizer.clone(),
        history,
        best_epoch: stopper.best_epoch,
    })
}

/// Writes `epoch,train_loss,train_mse,train_parabolic,train_ramp,val_mae`.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
