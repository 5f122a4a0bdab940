// SPDX-License-Identifier: Apache-2.0

//! Shapley attribution over feature columns.
//!
//! A player is one feature column, present or absent jointly across every
//! timestep of the window. The value of a coalition `S` is the mean model
//! output over background windows `b` with the explained window's columns in
//! `S` pasted onto `b`. [`shapley_exact`] enumerates all coalitions;
//! [`shapley_sampled`] averages marginal contributions along random player
//! orderings.

use crate::ensemble::EnsembleWeights;
use crate::extreme_events::Regime;
use crate::forecaster::{BranchPredictor, ForecastError};
use crate::ingest::{Feature, WindowSet, FEATURE_COUNT, WINDOW_HOURS};
use crate::physics::percentile;
use crate::time::Hour;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("background of {requested} requested from {available} training windows")]
    BackgroundTooLarge { requested: usize, available: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ForecastError),
}

/// Window layout: `timesteps` rows of `players` feature columns, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub timesteps: usize,
    pub players: usize,
}

impl Layout {
    pub const WINDOW: Layout = Layout { timesteps: WINDOW_HOURS, players: FEATURE_COUNT };

    pub fn len(&self) -> usize {
        self.timesteps * self.players
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch predictor over flat windows.
pub trait Model {
    fn predict_batch(&self, inputs: &[f64]) -> Result<Vec<f64>, AttributionError>;
}

impl Model for BranchPredictor {
    fn predict_batch(&self, inputs: &[f64]) -> Result<Vec<f64>, AttributionError> {
        Ok(self.predict_inputs(inputs)?)
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> Model for F {
    fn predict_batch(&self, inputs: &[f64]) -> Result<Vec<f64>, AttributionError> {
        Ok(self(inputs))
    }
}

/// The fused forecaster `w_cnn f_cnn + w_t f_t` as a single model.
pub struct EnsembleModel<'a, A: Model, B: Model> {
    pub cnn: &'a A,
    pub transformer: &'a B,
    pub weights: EnsembleWeights,
}

impl<A: Model, B: Model> Model for EnsembleModel<'_, A, B> {
    fn predict_batch(&self, inputs: &[f64]) -> Result<Vec<f64>, AttributionError> {
        let c = self.cnn.predict_batch(inputs)?;
        let t = self.transformer.predict_batch(inputs)?;
        Ok(c.iter().zip(&t).map(|(c, t)| self.weights.w_cnn * c + self.weights.w_t * t).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub fn of_month(month: u32) -> Season {
        match month {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Autumn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub season: Season,
    /// 0..=9, from the training set's target-temperature deciles.
    pub temp_decile: u8,
}

/// Background windows with the stratum each came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSet {
    pub layout: Layout,
    pub windows: Vec<f64>,
    pub strata: Vec<Stratum>,
    /// Positions in the training window set.
    pub source: Vec<usize>,
    pub seed: u64,
}

impl BackgroundSet {
    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn from_windows(layout: Layout, windows: Vec<f64>) -> Result<Self, AttributionError> {
        if layout.is_empty() || windows.is_empty() || windows.len() % layout.len() != 0 {
            return Err(AttributionError::Shape(format!("{} values for layout {layout:?}", windows.len())));
        }
        let n = windows.len() / layout.len();
        let stratum = Stratum { season: Season::Winter, temp_decile: 0 };
        Ok(BackgroundSet { layout, windows, strata: vec![stratum; n], source: (0..n).collect(), seed: 0 })
    }

    /// Draws `len()` windows with replacement.
    pub fn resample(&self, seed: u64) -> BackgroundSet {
        let w = self.layout.len();
        let mut out = BackgroundSet { layout: self.layout, windows: Vec::new(), strata: Vec::new(), source: Vec::new(), seed };
        for i in bootstrap_indices(self.len(), seed) {
            out.windows.extend_from_slice(&self.windows[i * w..(i + 1) * w]);
            out.strata.push(self.strata[i]);
            out.source.push(self.source[i]);
        }
        out
    }
}

/// Indices of a with-replacement draw of `n` items from `n`.
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Stratum of every training window: meteorological season of the target
/// hour and the decile of its temperature among all training targets.
pub fn strata_of(train: &WindowSet) -> Vec<Stratum> {
    let edges: Vec<f64> = (1..10)
        .filter_map(|k| percentile(&train.target_air_temp_c, 10.0 * k as f64))
        .collect();
    train
        .target_timestamps
        .iter()
        .zip(&train.target_air_temp_c)
        .map(|(ts, &t)| Stratum {
            season: Season::of_month(ts.month()),
            temp_decile: edges.iter().filter(|&&e| t > e).count() as u8,
        })
        .collect()
}

/// Proportional allocation of `total` across group sizes with
/// largest-remainder rounding; ties go to the earlier group.
pub fn allocate(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut rema: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &s)| ((s * total) % n, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - alloc.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        alloc[i] += 1;
    }
    alloc
}

/// Stratified sample of `size` training windows, drawn without replacement
/// within each (season, temperature decile) stratum.
pub fn stratified_background(train: &WindowSet, size: usize, seed: u64) -> Result<BackgroundSet, AttributionError> {
    if train.is_empty() {
        return Err(AttributionError::Empty("training set"));
    }
    if size == 0 || size > train.len() {
        return Err(AttributionError::BackgroundTooLarge { requested: size, available: train.len() });
    }
    let strata = strata_of(train);
    let mut groups: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(*s).or_default().push(i);
    }
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let alloc = allocate(&sizes, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(size);
    for (members, &k) in groups.values().zip(&alloc) {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let mut chosen = m[..k].to_vec();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    let layout = Layout::WINDOW;
    let mut bg = BackgroundSet { layout, windows: Vec::with_capacity(size * layout.len()), strata: Vec::new(), source: Vec::new(), seed };
    for i in picked {
        bg.windows.extend_from_slice(train.window(i));
        bg.strata.push(strata[i]);
        bg.source.push(i);
    }
    Ok(bg)
}

/// Attribution of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub phi: Vec<f64>,
    /// Mean model output over the background.
    pub base: f64,
    pub prediction: f64,
}

/// Attributions of one prediction split by background window.
///
/// The Shapley value is linear in the value function, and the value function
/// is a mean over background windows, so the attribution against any
/// weighting of the background is the same weighting of the per-window
/// attributions. Bootstrap resamples reuse these instead of re-evaluating the
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub players: usize,
    /// `background x players`, row-major.
    pub phi: Vec<f64>,
    /// Model output on each background window.
    pub base: Vec<f64>,
    pub prediction: f64,
}

impl Decomposition {
    pub fn background_len(&self) -> usize {
        self.base.len()
    }

    /// Attribution against the whole background.
    pub fn explanation(&self) -> Explanation {
        let nb = self.background_len() as f64;
        let mut phi = vec![0.0; self.players];
        for row in self.phi.chunks(self.players) {
            phi.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        phi.iter_mut().for_each(|v| *v /= nb);
        Explanation { phi, base: self.base.iter().sum::<f64>() / nb, prediction: self.prediction }
    }

    /// Attribution against the background drawn at `indices` (repeats allowed).
    pub fn resampled(&self, indices: &[usize]) -> Explanation {
        let n = indices.len() as f64;
        let mut phi = vec![0.0; self.players];
        let mut base = 0.0;
        for &b in indices {
            phi.iter_mut()
                .zip(&self.phi[b * self.players..(b + 1) * self.players])
                .for_each(|(a, v)| *a += v);
            base += self.base[b];
        }
        phi.iter_mut().for_each(|v| *v /= n);
        Explanation { phi, base: base / n, prediction: self.prediction }
    }

    /// `w_cnn a + w_t b`, per background window.
    pub fn combine(a: &Decomposition, b: &Decomposition, w: &EnsembleWeights) -> Result<Decomposition, AttributionError> {
        if a.players != b.players || a.base.len() != b.base.len() {
            return Err(AttributionError::Shape("decompositions do not line up".into()));
        }
        Ok(Decomposition {
            players: a.players,
            phi: ensemble_attribution(&a.phi, &b.phi, w)?,
            base: ensemble_attribution(&a.base, &b.base, w)?,
            prediction: w.w_cnn * a.prediction + w.w_t * b.prediction,
        })
    }
}

const EVAL_BATCH: usize = 2048;

/// Evaluates coalition values per background window, batching composites
/// across coalitions.
struct Game<'a, M: Model + ?Sized> {
    model: &'a M,
    x: &'a [f64],
    bg: &'a BackgroundSet,
}

impl<M: Model + ?Sized> Game<'_, M> {
    fn composite(&self, mask: u32, out: &mut Vec<f64>) {
        let Layout { timesteps, players } = self.bg.layout;
        let w = self.bg.layout.len();
        for b in 0..self.bg.len() {
            let bw = &self.bg.windows[b * w..(b + 1) * w];
            for t in 0..timesteps {
                for p in 0..players {
                    let k = t * players + p;
                    out.push(if mask >> p & 1 == 1 { self.x[k] } else { bw[k] });
                }
            }
        }
    }

    /// `f(x_S, b)` for each coalition mask (outer) and background window
    /// (inner).
    fn values(&self, masks: &[u32]) -> Result<Vec<f64>, AttributionError> {
        let nb = self.bg.len();
        let per_call = (EVAL_BATCH / nb).max(1);
        let mut values = Vec::with_capacity(masks.len() * nb);
        let mut buf = Vec::new();
        for chunk in masks.chunks(per_call) {
            buf.clear();
            for &m in chunk {
                self.composite(m, &mut buf);
            }
            let out = self.model.predict_batch(&buf)?;
            if out.len() != chunk.len() * nb {
                return Err(AttributionError::Shape(format!("model returned {} outputs for {} inputs", out.len(), chunk.len() * nb)));
            }
            values.extend(out);
        }
        Ok(values)
    }
}

fn check_inputs(x: &[f64], bg: &BackgroundSet) -> Result<(), AttributionError> {
    if bg.is_empty() {
        return Err(AttributionError::Empty("background"));
    }
    if x.len() != bg.layout.len() {
        return Err(AttributionError::Shape(format!("window of {} values for layout {:?}", x.len(), bg.layout)));
    }
    if bg.layout.players > 20 {
        return Err(AttributionError::Invalid(format!("{} players is too many", bg.layout.players)));
    }
    Ok(())
}

/// Exact per-background attributions by enumerating all `2^P` coalitions:
/// `phi_j = sum_{S not containing j} |S|! (P - |S| - 1)! / P! (v(S + j) - v(S))`.
pub fn decompose_exact<M: Model + ?Sized>(model: &M, x: &[f64], bg: &BackgroundSet) -> Result<Decomposition, AttributionError> {
    check_inputs(x, bg)?;
    let p = bg.layout.players;
    let nb = bg.len();
    let masks: Vec<u32> = (0..1u32 << p).collect();
    let f = Game { model, x, bg }.values(&masks)?;
    // |S|! (P - |S| - 1)! / P! = 1 / (P * C(P - 1, |S|))
    let mut binom = vec![1.0f64; p];
    for s in 1..p {
        binom[s] = binom[s - 1] * (p - s) as f64 / s as f64;
    }
    let weight: Vec<f64> = binom.iter().map(|c| 1.0 / (p as f64 * c)).collect();
    let full = (1usize << p) - 1;
    let mut phi = vec![0.0; nb * p];
    let mut v = vec![0.0; 1 << p];
    for b in 0..nb {
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = f[s * nb + b];
        }
        for j in 0..p {
            let bit = 1usize << j;
            let mut acc = 0.0;
            for s in 0..1usize << p {
                if s & bit == 0 {
                    acc += weight[s.count_ones() as usize] * (v[s | bit] - v[s]);
                }
            }
            phi[b * p + j] = acc;
        }
    }
    let base = (0..nb).map(|b| f[b]).collect();
    let prediction = f[full * nb..].iter().sum::<f64>() / nb as f64;
    Ok(Decomposition { players: p, phi, base, prediction })
}

/// Per-background permutation-sampling estimate: each player's marginal
/// contribution when added after its predecessors, averaged over
/// `n_permutations` seeded uniform orderings.
pub fn decompose_sampled<M: Model + ?Sized>(
    model: &M,
    x: &[f64],
    bg: &BackgroundSet,
    n_permutations: usize,
    seed: u64,
) -> Result<Decomposition, AttributionError> {
    check_inputs(x, bg)?;
    if n_permutations == 0 {
        return Err(AttributionError::Invalid("need at least one permutation".into()));
    }
    let p = bg.layout.players;
    let nb = bg.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..p).collect();
    let mut orders = Vec::with_capacity(n_permutations);
    let mut masks = vec![0u32, (1u32 << p) - 1];
    for _ in 0..n_permutations {
        order.shuffle(&mut rng);
        let mut m = 0u32;
        for &j in &order[..p - 1] {
            m |= 1 << j;
            masks.push(m);
        }
        orders.push(order.clone());
    }
    let f = Game { model, x, bg }.values(&masks)?;
    let mut phi = vec![0.0; nb * p];
    for b in 0..nb {
        let (empty, full) = (f[b], f[nb + b]);
        let row = &mut phi[b * p..(b + 1) * p];
        for (k, ord) in orders.iter().enumerate() {
            let mut prev = empty;
            for (pos, &j) in ord.iter().enumerate() {
                let cur = if pos + 1 == p { full } else { f[(2 + k * (p - 1) + pos) * nb + b] };
                row[j] += cur - prev;
                prev = cur;
            }
        }
        row.iter_mut().for_each(|v| *v /= n_permutations as f64);
    }
    let base = f[..nb].to_vec();
    let prediction = f[nb..2 * nb].iter().sum::<f64>() / nb as f64;
    Ok(Decomposition { players: p, phi, base, prediction })
}

/// Exact Shapley values against the background mean.
pub fn shapley_exact<M: Model + ?Sized>(model: &M, x: &[f64], bg: &BackgroundSet) -> Result<Explanation, AttributionError> {
    Ok(decompose_exact(model, x, bg)?.explanation())
}

/// Permutation-sampling estimate of the Shapley values.
pub fn shapley_sampled<M: Model + ?Sized>(
    model: &M,
    x: &[f64],
    bg: &BackgroundSet,
    n_permutations: usize,
    seed: u64,
) -> Result<Explanation, AttributionError> {
    Ok(decompose_sampled(model, x, bg, n_permutations, seed)?.explanation())
}

/// `phi_ens = w_cnn phi_cnn + w_t phi_t`, elementwise.
pub fn ensemble_attribution(phi_cnn: &[f64], phi_t: &[f64], weights: &EnsembleWeights) -> Result<Vec<f64>, AttributionError> {
    if phi_cnn.len() != phi_t.len() {
        return Err(AttributionError::Shape(format!("{} vs {} attributions", phi_cnn.len(), phi_t.len())));
    }
    Ok(phi_cnn.iter().zip(phi_t).map(|(c, t)| weights.w_cnn * c + weights.w_t * t).collect())
}

/// Per-sample attributions for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMatrix {
    pub model: String,
    pub players: usize,
    /// `rows x players`, row-major.
    pub phi: Vec<f64>,
    pub base: f64,
    pub predictions: Vec<f64>,
    pub timestamps: Vec<Hour>,
}

impl AttributionMatrix {
    pub fn rows(&self) -> usize {
        self.predictions.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.phi[i * self.players..(i + 1) * self.players]
    }

    /// Combines branch matrices by the ensemble weights.
    pub fn ensemble(cnn: &AttributionMatrix, t: &AttributionMatrix, w: &EnsembleWeights) -> Result<AttributionMatrix, AttributionError> {
        if cnn.timestamps != t.timestamps || cnn.players != t.players {
            return Err(AttributionError::Shape("branch attribution matrices do not line up".into()));
        }
        Ok(AttributionMatrix {
            model: "ensemble".into(),
            players: cnn.players,
            phi: ensemble_attribution(&cnn.phi, &t.phi, w)?,
            base: w.w_cnn * cnn.base + w.w_t * t.base,
            predictions: ensemble_attribution(&cnn.predictions, &t.predictions, w)?,
            timestamps: cnn.timestamps.clone(),
        })
    }
}

/// How explanations are computed for a batch of samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum Method {
    Exact,
    Sampled { permutations: usize, seed: u64 },
}

/// Decomposed attributions for every window; one permutation stream per
/// sample (`seed + i`), shared across models.
pub fn decompose_all<M: Model + ?Sized>(
    model: &M,
    windows: &WindowSet,
    bg: &BackgroundSet,
    method: Method,
) -> Result<Vec<Decomposition>, AttributionError> {
    let l = bg.layout.len();
    if windows.inputs.len() != windows.len() * l {
        return Err(AttributionError::Shape(format!("{} input values for {} windows", windows.inputs.len(), windows.len())));
    }
    (0..windows.len())
        .map(|i| {
            let x = &windows.inputs[i * l..(i + 1) * l];
            match method {
                Method::Exact => decompose_exact(model, x, bg),
                Method::Sampled { permutations, seed } => decompose_sampled(model, x, bg, permutations, seed.wrapping_add(i as u64)),
            }
        })
        .collect()
}

/// Collects per-sample explanations into a matrix.
pub fn matrix_of(name: &str, timestamps: &[Hour], explanations: &[Explanation]) -> Result<AttributionMatrix, AttributionError> {
    let first = explanations.first().ok_or(AttributionError::Empty("explanations"))?;
    if timestamps.len() != explanations.len() {
        return Err(AttributionError::Shape(format!("{} timestamps for {} explanations", timestamps.len(), explanations.len())));
    }
    Ok(AttributionMatrix {
        model: name.to_string(),
        players: first.phi.len(),
        phi: explanations.iter().flat_map(|e| e.phi.iter().copied()).collect(),
        base: first.base,
        predictions: explanations.iter().map(|e| e.prediction).collect(),
        timestamps: timestamps.to_vec(),
    })
}

pub fn explain<M: Model + ?Sized>(
    name: &str,
    model: &M,
    windows: &WindowSet,
    bg: &BackgroundSet,
    method: Method,
) -> Result<AttributionMatrix, AttributionError> {
    let parts = decompose_all(model, windows, bg, method)?;
    let explanations: Vec<Explanation> = parts.iter().map(Decomposition::explanation).collect();
    matrix_of(name, &windows.target_timestamps, &explanations)
}

/// Mean absolute attribution per feature with the derived ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking {
    pub regime: Regime,
    pub features: Vec<String>,
    pub importance: Vec<f64>,
    /// Feature indices, most important first; ties broken by index.
    pub order: Vec<usize>,
}

impl ImportanceRanking {
    /// 1-based rank of each feature.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.order.len()];
        for (pos, &f) in self.order.iter().enumerate() {
            r[f] = pos + 1;
        }
        r
    }
}

pub fn feature_names(players: usize) -> Vec<String> {
    if players == FEATURE_COUNT {
        Feature::ALL.iter().map(|f| f.name().to_string()).collect()
    } else {
        (0..players).map(|j| format!("x{j}")).collect()
    }
}

/// `I_j = mean_i |phi_{i,j}|` over the rows admitted by `regime`
/// (`flags` marks extreme rows; ignored for [`Regime::All`]).
pub fn global_importance(m: &AttributionMatrix, flags: Option<&[bool]>, regime: Regime) -> Result<ImportanceRanking, AttributionError> {
    if let Some(f) = flags {
        if f.len() != m.rows() {
            return Err(AttributionError::Shape(format!("{} flags for {} rows", f.len(), m.rows())));
        }
    }
    let rows: Vec<usize> = (0..m.rows())
        .filter(|&i| regime == Regime::All || regime.admits(flags.is_some_and(|f| f[i])))
        .collect();
    if rows.is_empty() {
        return Err(AttributionError::Empty("regime subset"));
    }
    let mut importance = vec![0.0; m.players];
    for &i in &rows {
        for (acc, v) in importance.iter_mut().zip(m.row(i)) {
            *acc += v.abs();
        }
    }
    importance.iter_mut().for_each(|v| *v /= rows.len() as f64);
    let mut order: Vec<usize> = (0..m.players).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    Ok(ImportanceRanking { regime, features: feature_names(m.players), importance, order })
}

/// `(concordant - discordant) / C(n, 2)` between two rank vectors.
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<f64, AttributionError> {
    if rank_a.len() != rank_b.len() {
        return Err(AttributionError::Shape(format!("rankings of length {} and {}", rank_a.len(), rank_b.len())));
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(AttributionError::Invalid("need at least two ranked items".into()));
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = (rank_a[i] as i64 - rank_a[j] as i64).signum();
            let b = (rank_b[i] as i64 - rank_b[j] as i64).signum();
            score += a * b;
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub reference: ImportanceRanking,
    pub taus: Vec<f64>,
    pub mean_tau: f64,
}

/// Recomputes the global ranking under `n_boot` with-replacement resamples of
/// the background (`seed + k`) and compares each with the reference ranking.
/// The explanation method (and its permutation seeds) is held fixed so only
/// the background varies.
pub fn stability_from_parts(parts: &[Decomposition], bg_len: usize, n_boot: usize, seed: u64) -> Result<StabilityReport, AttributionError> {
    if n_boot < 2 {
        return Err(AttributionError::Invalid(format!("{n_boot} bootstrap resamples")));
    }
    if parts.iter().any(|d| d.background_len() != bg_len) {
        return Err(AttributionError::Shape("decompositions were computed on another background".into()));
    }
    let stamps: Vec<Hour> = (0..parts.len() as i64).map(Hour).collect();
    let ranking = |explanations: Vec<Explanation>| -> Result<ImportanceRanking, AttributionError> {
        global_importance(&matrix_of("model", &stamps, &explanations)?, None, Regime::All)
    };
    let reference = ranking(parts.iter().map(Decomposition::explanation).collect())?;
    let ref_ranks = reference.ranks();
    let mut taus = Vec::with_capacity(n_boot);
    for k in 0..n_boot {
        let idx = bootstrap_indices(bg_len, seed.wrapping_add(k as u64));
        let r = ranking(parts.iter().map(|d| d.resampled(&idx)).collect())?;
        taus.push(kendall_tau(&ref_ranks, &r.ranks())?);
    }
    let mean_tau = taus.iter().sum::<f64>() / n_boot as f64;
    Ok(StabilityReport { reference, taus, mean_tau })
}

pub fn bootstrap_stability<M: Model + ?Sized>(
    model: &M,
    samples: &WindowSet,
    bg: &BackgroundSet,
    method: Method,
    n_boot: usize,
    seed: u64,
) -> Result<StabilityReport, AttributionError> {
    let parts = decompose_all(model, samples, bg, method)?;
    stability_from_parts(&parts, bg.len(), n_boot, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeComparisonRow {
    pub feature: String,
    pub rank_normal: usize,
    pub rank_extreme: usize,
    /// Extreme over normal importance; `None` when the normal importance is
    /// zero and the extreme one is not.
    pub ratio: Option<f64>,
}

pub fn regime_comparison(extreme: &ImportanceRanking, normal: &ImportanceRanking) -> Result<Vec<RegimeComparisonRow>, AttributionError> {
    if extreme.importance.len() != normal.importance.len() {
        return Err(AttributionError::Shape("rankings over different feature sets".into()));
    }
    let (re, rn) = (extreme.ranks(), normal.ranks());
    Ok((0..extreme.importance.len())
        .map(|j| {
            let (e, n) = (extreme.importance[j], normal.importance[j]);
            let ratio = if n != 0.0 { Some(e / n) } else if e == 0.0 { Some(1.0) } else { None };
            RegimeComparisonRow { feature: normal.features[j].clone(), rank_normal: rn[j], rank_extreme: re[j], ratio }
        })
        .collect())
}

/// One row per (sample, model): timestamp, model, one column per feature,
/// base value and prediction.
pub fn write_attribution_csv<W: Write>(matrices: &[&AttributionMatrix], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = matrices.first() else {
        return Ok(());
    };
    let mut header = vec!["timestamp".to_string(), "model".to_string()];
    header.extend(feature_names(first.players).into_iter().map(|f| format!("phi_{f}")));
    header.extend(["base".to_string(), "prediction".to_string()]);
    w.write_record(&header)?;
    for i in 0..first.rows() {
        for m in matrices {
            let mut rec = vec![m.timestamps[i].to_string(), m.model.clone()];
            rec.extend(m.row(i).iter().map(f64::to_string));
            rec.push(m.base.to_string());
            rec.push(m.predictions[i].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
