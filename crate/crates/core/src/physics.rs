// SPDX-License-Identifier: Apache-2.0

//! Temperature-demand envelope, tolerance band and the physics penalty terms.
//!
//! Everything here works in physical units: MW for demand and °C for
//! temperature. Penalties return the loss value together with its exact
//! gradient with respect to each prediction.

use crate::linalg::least_squares;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PhysicsError {
    #[error("segment {segment} has {count} points, need at least 3")]
    TooFewPoints { segment: &'static str, count: usize },
    #[error("segment {0} design is rank deficient")]
    RankDeficient(&'static str),
    #[error("segment {0} is not convex (leading coefficient must be positive)")]
    NotConvex(&'static str),
    #[error("input vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// `a T^2 + b T + c`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    pub fn eval(&self, t: f64) -> f64 {
        (self.a * t + self.b) * t + self.c
    }
}

/// Two-segment quadratic demand curve split at `t0_c`: the heating segment
/// applies for `T < t0_c`, the cooling segment for `T >= t0_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicEnvelope {
    pub heating: Quadratic,
    pub cooling: Quadratic,
    pub t0_c: f64,
}

impl ParabolicEnvelope {
    /// Pre-calibrated ERCOT coefficients.
    pub const ERCOT: ParabolicEnvelope = ParabolicEnvelope {
        heating: Quadratic { a: 47.2, b: -1560.6, c: 51_230.0 },
        cooling: Quadratic { a: 52.4, b: -864.5, c: 35_523.9 },
        t0_c: 18.5,
    };

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.heating.a > 0.0) {
            return Err(PhysicsError::NotConvex("heating"));
        }
        if !(self.cooling.a > 0.0) {
            return Err(PhysicsError::NotConvex("cooling"));
        }
        if !self.t0_c.is_finite() {
            return Err(PhysicsError::InvalidParameter("t0_c must be finite".into()));
        }
        Ok(())
    }

    /// Expected demand at temperature `t_c`, in MW.
    pub fn demand(&self, t_c: f64) -> f64 {
        if t_c < self.t0_c {
            self.heating.eval(t_c)
        } else {
            self.cooling.eval(t_c)
        }
    }

    /// `D(t0+) - D(t0-)`; zero for a continuous envelope.
    pub fn jump_at_breakpoint(&self) -> f64 {
        self.cooling.eval(self.t0_c) - self.heating.eval(self.t0_c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeFit {
    pub envelope: ParabolicEnvelope,
    /// `demand - D(temp)` for every input point, in input order.
    pub residuals: Vec<f64>,
}

/// Per-segment ordinary least squares fit of the two quadratics.
///
/// With `continuous` set, both segments are fitted jointly under the
/// constraint `D(t0-) = D(t0+)` (the cooling intercept is eliminated).
pub fn fit_envelope(
    temps: &[f64],
    demands: &[f64],
    t0_c: f64,
    continuous: bool,
) -> Result<EnvelopeFit, PhysicsError> {
    if temps.len() != demands.len() {
        return Err(PhysicsError::LengthMismatch(temps.len(), demands.len()));
    }
    let heating_n = temps.iter().filter(|&&t| t < t0_c).count();
    let cooling_n = temps.len() - heating_n;
    if heating_n < 3 {
        return Err(PhysicsError::TooFewPoints { segment: "heating", count: heating_n });
    }
    if cooling_n < 3 {
        return Err(PhysicsError::TooFewPoints { segment: "cooling", count: cooling_n });
    }

    let envelope = if continuous {
        // unknowns: a1 b1 c1 a2 b2; c2 = c1 + (a1 - a2) t0^2 + (b1 - b2) t0
        let mut design = Vec::with_capacity(temps.len() * 5);
        for &t in temps {
            if t < t0_c {
                design.extend_from_slice(&[t * t, t, 1.0, 0.0, 0.0]);
            } else {
                let t0 = t0_c;
                design.extend_from_slice(&[t0 * t0, t0, 1.0, t * t - t0 * t0, t - t0]);
            }
        }
        let x = least_squares(&design, temps.len(), 5, demands)
            .ok_or(PhysicsError::RankDeficient("joint"))?;
        let heating = Quadratic { a: x[0], b: x[1], c: x[2] };
        let c2 = x[2] + (x[0] - x[3]) * t0_c * t0_c + (x[1] - x[4]) * t0_c;
        ParabolicEnvelope {
            heating,
            cooling: Quadratic { a: x[3], b: x[4], c: c2 },
            t0_c,
        }
    } else {
        let fit_segment = |name: &'static str, keep: &dyn Fn(f64) -> bool| {
            let (design, y): (Vec<[f64; 3]>, Vec<f64>) = temps
                .iter()
                .zip(demands)
                .filter(|(&t, _)| keep(t))
                .map(|(&t, &d)| ([t * t, t, 1.0], d))
                .unzip();
            let flat: Vec<f64> = design.into_iter().flatten().collect();
            least_squares(&flat, y.len(), 3, &y)
                .map(|x| Quadratic { a: x[0], b: x[1], c: x[2] })
                .ok_or(PhysicsError::RankDeficient(name))
        };
        ParabolicEnvelope {
            heating: fit_segment("heating", &|t| t < t0_c)?,
            cooling: fit_segment("cooling", &|t| t >= t0_c)?,
            t0_c,
        }
    };
    let residuals = temps
        .iter()
        .zip(demands)
        .map(|(&t, &d)| d - envelope.demand(t))
        .collect();
    Ok(EnvelopeFit { envelope, residuals })
}

/// Temperature-binned residual spread; the band half-width is `2 sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceModel {
    /// `bins + 1` sorted edges; temperatures outside use the end bins.
    pub bin_edges_c: Vec<f64>,
    pub sigma_mw: Vec<f64>,
    pub sigma_floor_mw: f64,
}

pub const MIN_BIN_COUNT: usize = 30;

impl ToleranceModel {
    fn bin(&self, t_c: f64) -> usize {
        let bins = self.sigma_mw.len();
        let idx = self.bin_edges_c.partition_point(|&e| e <= t_c);
        idx.saturating_sub(1).min(bins - 1)
    }

    pub fn sigma(&self, t_c: f64) -> f64 {
        self.sigma_mw[self.bin(t_c)]
    }

    /// Band half-width `2 sigma(T)`, in MW.
    pub fn epsilon(&self, t_c: f64) -> f64 {
        2.0 * self.sigma(t_c)
    }

    /// A single-bin band of fixed width, mostly for tests.
    pub fn constant(sigma_mw: f64) -> Self {
        ToleranceModel {
            bin_edges_c: vec![f64::NEG_INFINITY, f64::INFINITY],
            sigma_mw: vec![sigma_mw],
            sigma_floor_mw: sigma_mw,
        }
    }
}

/// Fits per-bin residual standard deviations on bins of `bin_width_c`.
///
/// Bins with fewer than [`MIN_BIN_COUNT`] points take the sigma of the
/// nearest populated bin (ties go to the colder bin). If no bin is populated
/// the pooled sigma is used everywhere. Every sigma is clamped below by
/// `sigma_floor_mw`.
pub fn fit_tolerance(
    temps: &[f64],
    residuals: &[f64],
    bin_width_c: f64,
    sigma_floor_mw: f64,
) -> Result<ToleranceModel, PhysicsError> {
    if temps.len() != residuals.len() {
        return Err(PhysicsError::LengthMismatch(temps.len(), residuals.len()));
    }
    if temps.is_empty() {
        return Err(PhysicsError::Empty);
    }
    if !(bin_width_c > 0.0) || !(sigma_floor_mw > 0.0) {
        return Err(PhysicsError::InvalidParameter(
            "bin width and sigma floor must be positive".into(),
        ));
    }
    let lo = temps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = temps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / bin_width_c).floor();
    let bins = (((hi / bin_width_c).floor() - first) as usize) + 1;
    let edges: Vec<f64> = (0..=bins).map(|i| (first + i as f64) * bin_width_c).collect();

    let mut members: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for (&t, &r) in temps.iter().zip(residuals) {
        let idx = (((t / bin_width_c).floor() - first) as usize).min(bins - 1);
        members[idx].push(r);
    }
    let std = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
    };
    let populated: Vec<Option<f64>> = members
        .iter()
        .map(|m| (m.len() >= MIN_BIN_COUNT).then(|| std(m)))
        .collect();
    let pooled = std(residuals);
    let sigma: Vec<f64> = (0..bins)
        .map(|i| {
            let s = populated[i].or_else(|| {
                (1..bins).find_map(|d| {
                    let below = i.checked_sub(d).and_then(|j| populated[j]);
                    let above = populated.get(i + d).copied().flatten();
                    below.or(above)
                })
            });
            s.unwrap_or(pooled).max(sigma_floor_mw)
        })
        .collect();
    Ok(ToleranceModel {
        bin_edges_c: edges,
        sigma_mw: sigma,
        sigma_floor_mw,
    })
}

/// Coefficients of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta_max_mw: f64,
}

impl PhysicsLossConfig {
    pub const DEFAULT_LAMBDA1: f64 = 0.1;
    pub const DEFAULT_LAMBDA2: f64 = 0.05;

    pub fn new(lambda1: f64, lambda2: f64, delta_max_mw: f64) -> Result<Self, PhysicsError> {
        if !(lambda1 >= 0.0) || !(lambda2 >= 0.0) {
            return Err(PhysicsError::InvalidParameter("lambdas must be non-negative".into()));
        }
        if !(delta_max_mw > 0.0) {
            return Err(PhysicsError::InvalidParameter("delta_max must be positive".into()));
        }
        Ok(PhysicsLossConfig { lambda1, lambda2, delta_max_mw })
    }
}

/// Loss value with its gradient with respect to each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Number of terms averaged over (samples or pairs).
    pub terms: usize,
}

/// `mean_i max(0, |pred_i - D(T_i)| - eps(T_i))^2`
pub fn parabolic_penalty(
    pred_mw: &[f64],
    temp_c: &[f64],
    envelope: &ParabolicEnvelope,
    tolerance: &ToleranceModel,
) -> Penalty {
    assert_eq!(pred_mw.len(), temp_c.len(), "parabolic_penalty: length mismatch");
    let n = pred_mw.len();
    let mut grad = vec![0.0; n];
    if n == 0 {
        return Penalty { loss: 0.0, grad, terms: 0 };
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let dev = pred_mw[i] - envelope.demand(temp_c[i]);
        let excess = dev.abs() - tolerance.epsilon(temp_c[i]);
        if excess > 0.0 {
            loss += excess * excess;
            grad[i] = 2.0 * excess * dev.signum() * scale;
        }
    }
    Penalty { loss: loss * scale, grad, terms: n }
}

/// Ramp hinge over explicit `(earlier, later)` index pairs, averaged over pairs.
pub fn ramp_penalty_pairs(pred_mw: &[f64], pairs: &[(usize, usize)], delta_max_mw: f64) -> Penalty {
    let mut grad = vec![0.0; pred_mw.len()];
    if pairs.is_empty() {
        return Penalty { loss: 0.0, grad, terms: 0 };
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for &(prev, cur) in pairs {
        let step = pred_mw[cur] - pred_mw[prev];
        let excess = step.abs() - delta_max_mw;
        if excess > 0.0 {
            loss += excess * excess;
            let g = 2.0 * excess * step.signum() * scale;
            grad[cur] += g;
            grad[prev] -= g;
        }
    }
    Penalty { loss: loss * scale, grad, terms: pairs.len() }
}

/// `mean_{i>=1} max(0, |pred_i - pred_{i-1}| - delta_max)^2` over a
/// chronologically consecutive series. Fewer than two predictions give a
/// zero loss with `terms == 0`.
pub fn ramp_penalty(pred_mw: &[f64], delta_max_mw: f64) -> Penalty {
    let pairs: Vec<(usize, usize)> = (1..pred_mw.len()).map(|i| (i - 1, i)).collect();
    ramp_penalty_pairs(pred_mw, &pairs, delta_max_mw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeLoss {
    pub total: f64,
    pub mse: f64,
    pub parabolic: f64,
    pub ramp: f64,
    pub grad: Vec<f64>,
}

impl CompositeLoss {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("mse", self.mse), ("parabolic", self.parabolic), ("ramp", self.ramp), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| name)
    }
}

/// `L = MSE + lambda1 * L_parabolic + lambda2 * L_ramp`, all in MW.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    pred_mw: &[f64],
    target_mw: &[f64],
    temp_c: &[f64],
    pairs: &[(usize, usize)],
    envelope: &ParabolicEnvelope,
    tolerance: &ToleranceModel,
    cfg: &PhysicsLossConfig,
) -> CompositeLoss {
    let n = pred_mw.len();
    assert_eq!(n, target_mw.len(), "composite_loss: length mismatch");
    let mut grad = vec![0.0; n];
    let mut mse = 0.0;
    if n > 0 {
        let scale = 1.0 / n as f64;
        for i in 0..n {
            let r = pred_mw[i] - target_mw[i];
            mse += r * r;
            grad[i] = 2.0 * r * scale;
        }
        mse *= scale;
    }
    let mut parabolic = 0.0;
    if cfg.lambda1 != 0.0 {
        let p = parabolic_penalty(pred_mw, temp_c, envelope, tolerance);
        parabolic = p.loss;
        for (g, pg) in grad.iter_mut().zip(&p.grad) {
            *g += cfg.lambda1 * pg;
        }
    }
    let mut ramp = 0.0;
    if cfg.lambda2 != 0.0 {
        let p = ramp_penalty_pairs(pred_mw, pairs, cfg.delta_max_mw);
        ramp = p.loss;
        for (g, pg) in grad.iter_mut().zip(&p.grad) {
            *g += cfg.lambda2 * pg;
        }
    }
    CompositeLoss {
        total: mse + cfg.lambda1 * parabolic + cfg.lambda2 * ramp,
        mse,
        parabolic,
        ramp,
        grad,
    }
}

/// Percentile by linear interpolation between order statistics: with sorted
/// values `x` and `h = (n - 1) p / 100`, returns
/// `x[floor h] + (h - floor h) (x[floor h + 1] - x[floor h])`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub const DEFAULT_RAMP_PERCENTILE: f64 = 99.5;

/// Ramp limit: the given percentile of absolute hour-over-hour differences.
pub fn estimate_delta_max(train_demand: &[f64], percentile_p: f64) -> Result<f64, PhysicsError> {
    if train_demand.len() < 2 {
        return Err(PhysicsError::Empty);
    }
    let diffs: Vec<f64> = train_demand.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    percentile(&diffs, percentile_p)
        .ok_or_else(|| PhysicsError::InvalidParameter(format!("percentile {percentile_p}")))
}

/// Everything the physics terms need, persisted between calibration and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsCalibration {
    pub envelope: ParabolicEnvelope,
    pub tolerance: ToleranceModel,
    pub delta_max_mw: f64,
}
