// SPDX-License-Identifier: Apache-2.0

use super::{ForwardCtx, Layer, Mode, NnError, ParameterSet, Tensor};
use crate::linalg::gemm;
use rand::{Rng, RngCore};

fn grad_and_value<'a>(
    params: &'a mut ParameterSet,
    name: &str,
) -> Result<(&'a Tensor, &'a mut Tensor), NnError> {
    let v = params
        .values
        .get(name)
        .ok_or_else(|| NnError::MissingParameter(name.to_string()))?;
    let g = params
        .grads
        .get_mut(name)
        .ok_or_else(|| NnError::MissingParameter(name.to_string()))?;
    Ok((v, g))
}

fn grad_mut<'a>(params: &'a mut ParameterSet, name: &str) -> Result<&'a mut Tensor, NnError> {
    params
        .grads
        .get_mut(name)
        .ok_or_else(|| NnError::MissingParameter(name.to_string()))
}

/// Uniform fan-in initialisation, `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`
/// (unit-variance preserving for unit-variance inputs).
pub(crate) fn fan_in_limit(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

/// Affine map over the last dimension: `y = x W + b`, `W` is `[in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    x: Tensor,
}

impl Dense {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Dense { name: name.into(), input, output }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        let limit = fan_in_limit(self.input);
        params.insert(self.weight(), Tensor::uniform(&[self.input, self.output], limit, rng));
        params.insert(self.bias(), Tensor::zeros(&[self.output]));
    }
}

impl Layer for Dense {
    type Cache = DenseCache;

    fn forward(&self, params: &ParameterSet, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, DenseCache), NnError> {
        if x.last_dim() != self.input {
            return Err(NnError::Shape(format!(
                "{}: expected last dim {}, got {:?}",
                self.name, self.input, x.shape
            )));
        }
        let rows = x.len() / self.input;
        let w = params.value(&self.weight())?;
        let b = params.value(&self.bias())?;
        let mut y = Vec::with_capacity(rows * self.output);
        for _ in 0..rows {
            y.extend_from_slice(&b.data);
        }
        gemm(rows, self.input, self.output, 1.0, &x.data, false, &w.data, false, 1.0, &mut y);
        let mut shape = x.shape.clone();
        *shape.last_mut().expect("non-empty shape") = self.output;
        Ok((Tensor { shape, data: y }, DenseCache { x: x.clone() }))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &DenseCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let rows = cache.x.len() / self.input;
        if grad_out.len() != rows * self.output {
            return Err(NnError::Shape(format!("{}: gradient shape {:?}", self.name, grad_out.shape)));
        }
        {
            let gb = grad_mut(params, &self.bias())?;
            for r in 0..rows {
                for (g, d) in gb.data.iter_mut().zip(&grad_out.data[r * self.output..(r + 1) * self.output]) {
                    *g += d;
                }
            }
        }
        let (w, gw) = grad_and_value(params, &self.weight())?;
        gemm(self.input, rows, self.output, 1.0, &cache.x.data, true, &grad_out.data, false, 1.0, &mut gw.data);
        let mut dx = vec![0.0; rows * self.input];
        gemm(rows, self.output, self.input, 1.0, &grad_out.data, false, &w.data, true, 0.0, &mut dx);
        Ok(Tensor { shape: cache.x.shape.clone(), data: dx })
    }
}

/// 1-D convolution over time with zero "same" padding.
///
/// Weight layout is `[kernel * in_channels, out_channels]` with row
/// `k * in_channels + c` multiplying input channel `c` at offset `k - kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    cols: Vec<f64>,
    dims: (usize, usize, usize),
}

impl Conv1d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv1d { name: name.into(), in_channels, out_channels, kernel }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        let fan_in = self.kernel * self.in_channels;
        params.insert(self.weight_name(), Tensor::uniform(&[fan_in, self.out_channels], fan_in_limit(fan_in), rng));
        params.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]));
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (b, t, c) = (x.shape[0], x.shape[1], x.shape[2]);
        let width = self.kernel * c;
        let half = (self.kernel / 2) as isize;
        let mut cols = vec![0.0; b * t * width];
        for bi in 0..b {
            for ti in 0..t {
                let row = &mut cols[(bi * t + ti) * width..(bi * t + ti + 1) * width];
                for k in 0..self.kernel {
                    let src = ti as isize + k as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let base = (bi * t + src as usize) * c;
                    row[k * c..(k + 1) * c].copy_from_slice(&x.data[base..base + c]);
                }
            }
        }
        cols
    }
}

impl Layer for Conv1d {
    type Cache = Conv1dCache;

    fn forward(&self, params: &ParameterSet, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, Conv1dCache), NnError> {
        let (b, t, c) = x.dims3()?;
        if c != self.in_channels {
            return Err(NnError::Shape(format!("{}: expected {} channels, got {c}", self.name, self.in_channels)));
        }
        if t < self.kernel {
            return Err(NnError::Shape(format!("{}: sequence length {t} shorter than kernel {}", self.name, self.kernel)));
        }
        let cols = self.im2col(x);
        let w = params.value(&self.weight_name())?;
        let bias = params.value(&self.bias_name())?;
        let rows = b * t;
        let mut y = Vec::with_capacity(rows * self.out_channels);
        for _ in 0..rows {
            y.extend_from_slice(&bias.data);
        }
        gemm(rows, self.kernel * c, self.out_channels, 1.0, &cols, false, &w.data, false, 1.0, &mut y);
        Ok((
            Tensor { shape: vec![b, t, self.out_channels], data: y },
            Conv1dCache { cols, dims: (b, t, c) },
        ))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &Conv1dCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let (b, t, c) = cache.dims;
        let rows = b * t;
        let width = self.kernel * c;
        if grad_out.len() != rows * self.out_channels {
            return Err(NnError::Shape(format!("{}: gradient shape {:?}", self.name, grad_out.shape)));
        }
        {
            let gb = grad_mut(params, &self.bias_name())?;
            for r in 0..rows {
                for (g, d) in gb.data.iter_mut().zip(&grad_out.data[r * self.out_channels..(r + 1) * self.out_channels]) {
                    *g += d;
                }
            }
        }
        let (w, gw) = grad_and_value(params, &self.weight_name())?;
        gemm(width, rows, self.out_channels, 1.0, &cache.cols, true, &grad_out.data, false, 1.0, &mut gw.data);
        let mut dcols = vec![0.0; rows * width];
        gemm(rows, self.out_channels, width, 1.0, &grad_out.data, false, &w.data, true, 0.0, &mut dcols);
        let half = (self.kernel / 2) as isize;
        let mut dx = vec![0.0; b * t * c];
        for bi in 0..b {
            for ti in 0..t {
                let row = &dcols[(bi * t + ti) * width..(bi * t + ti + 1) * width];
                for k in 0..self.kernel {
                    let src = ti as isize + k as isize - half;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let base = (bi * t + src as usize) * c;
                    for ci in 0..c {
                        dx[base + ci] += row[k * c + ci];
                    }
                }
            }
        }
        Ok(Tensor { shape: vec![b, t, c], data: dx })
    }
}

/// Batch normalisation over the batch and time axes, per channel.
///
/// Train mode normalises with batch statistics; infer mode with the running
/// statistics kept as buffers `{name}.running_mean` / `{name}.running_var`.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    count: usize,
    mode: Mode,
}

impl BatchNorm1d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm1d { name: name.into(), channels, eps: 1e-5, momentum: 0.1 }
    }

    fn gamma(&self) -> String {
        format!("{}.gamma", self.name)
    }

    fn beta(&self) -> String {
        format!("{}.beta", self.name)
    }

    fn running_mean(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    fn running_var(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn init(&self, params: &mut ParameterSet) {
        params.insert(self.gamma(), Tensor::full(&[self.channels], 1.0));
        params.insert(self.beta(), Tensor::zeros(&[self.channels]));
        params.insert_buffer(self.running_mean(), Tensor::zeros(&[self.channels]));
        params.insert_buffer(self.running_var(), Tensor::full(&[self.channels], 1.0));
    }

    /// Folds the batch statistics of a train-mode pass into the running buffers.
    pub fn update_running(&self, params: &mut ParameterSet, cache: &BatchNormCache) -> Result<(), NnError> {
        if cache.mode != Mode::Train {
            return Ok(());
        }
        let m = self.momentum;
        let unbias = if cache.count > 1 { cache.count as f64 / (cache.count - 1) as f64 } else { 1.0 };
        let rm = params
            .buffers
            .get_mut(&self.running_mean())
            .ok_or_else(|| NnError::MissingParameter(self.running_mean()))?;
        for (r, b) in rm.data.iter_mut().zip(&cache.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = params
            .buffers
            .get_mut(&self.running_var())
            .ok_or_else(|| NnError::MissingParameter(self.running_var()))?;
        for (r, b) in rv.data.iter_mut().zip(&cache.batch_var) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
        Ok(())
    }
}

impl Layer for BatchNorm1d {
    type Cache = BatchNormCache;

    fn forward(&self, params: &ParameterSet, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, BatchNormCache), NnError> {
        let c = self.channels;
        if x.last_dim() != c {
            return Err(NnError::Shape(format!("{}: expected {c} channels, got {:?}", self.name, x.shape)));
        }
        let n = x.len() / c;
        let (mean, var) = match ctx.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for ch in 0..c {
                        mean[ch] += x.data[r * c + ch];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ch in 0..c {
                        let d = x.data[r * c + ch] - mean[ch];
                        var[ch] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            Mode::Infer => (
                params.buffer(&self.running_mean())?.data.clone(),
                params.buffer(&self.running_var())?.data.clone(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = &params.value(&self.gamma())?.data;
        let beta = &params.value(&self.beta())?.data;
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for r in 0..n {
            for ch in 0..c {
                let i = r * c + ch;
                xhat[i] = (x.data[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
        Ok((
            Tensor { shape: x.shape.clone(), data: y },
            BatchNormCache { xhat, inv_std, batch_mean: mean, batch_var: var, count: n, mode: ctx.mode },
        ))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &BatchNormCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let c = self.channels;
        let n = cache.count;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for r in 0..n {
            for ch in 0..c {
                let i = r * c + ch;
                sum_dy[ch] += grad_out.data[i];
                sum_dy_xhat[ch] += grad_out.data[i] * cache.xhat[i];
            }
        }
        grad_mut(params, &self.beta())?.data.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s);
        let (gamma, ggamma) = grad_and_value(params, &self.gamma())?;
        ggamma.data.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s);
        let mut dx = vec![0.0; n * c];
        let nf = n as f64;
        for r in 0..n {
            for ch in 0..c {
                let i = r * c + ch;
                let scale = gamma.data[ch] * cache.inv_std[ch];
                dx[i] = match cache.mode {
                    Mode::Train => scale / nf * (nf * grad_out.data[i] - sum_dy[ch] - cache.xhat[i] * sum_dy_xhat[ch]),
                    Mode::Infer => scale * grad_out.data[i],
                };
            }
        }
        Ok(Tensor { shape: grad_out.shape.clone(), data: dx })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

#[derive(Debug, Clone)]
pub struct ReluCache {
    active: Vec<bool>,
}

impl Layer for Relu {
    type Cache = ReluCache;

    fn forward(&self, _params: &ParameterSet, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, ReluCache), NnError> {
        let active: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
        let y = x.data.iter().map(|&v| v.max(0.0)).collect();
        Ok((Tensor { shape: x.shape.clone(), data: y }, ReluCache { active }))
    }

    fn backward(&self, _params: &mut ParameterSet, cache: &ReluCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let dx = grad_out
            .data
            .iter()
            .zip(&cache.active)
            .map(|(&g, &a)| if a { g } else { 0.0 })
            .collect();
        Ok(Tensor { shape: grad_out.shape.clone(), data: dx })
    }
}

/// Max pooling over time, window 2 and stride 2; output length `floor(T / 2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool1d;

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

impl Layer for MaxPool1d {
    type Cache = MaxPoolCache;

    fn forward(&self, _params: &ParameterSet, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, MaxPoolCache), NnError> {
        let (b, t, c) = x.dims3()?;
        let to = t / 2;
        if to == 0 {
            return Err(NnError::Shape(format!("max-pool needs length >= 2, got {t}")));
        }
        let mut y = Vec::with_capacity(b * to * c);
        let mut argmax = Vec::with_capacity(b * to * c);
        for bi in 0..b {
            for ti in 0..to {
                for ch in 0..c {
                    let i0 = (bi * t + 2 * ti) * c + ch;
                    let i1 = i0 + c;
                    let pick = if x.data[i1] > x.data[i0] { i1 } else { i0 };
                    y.push(x.data[pick]);
                    argmax.push(pick);
                }
            }
        }
        Ok((
            Tensor { shape: vec![b, to, c], data: y },
            MaxPoolCache { argmax, input_shape: x.shape.clone() },
        ))
    }

    fn backward(&self, _params: &mut ParameterSet, cache: &MaxPoolCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let mut dx = vec![0.0; cache.input_shape.iter().product()];
        for (&idx, &g) in cache.argmax.iter().zip(&grad_out.data) {
            dx[idx] += g;
        }
        Ok(Tensor { shape: cache.input_shape.clone(), data: dx })
    }
}

/// Mean over the time axis: `[B, T, C] -> [B, C]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool;

impl Layer for GlobalAvgPool {
    type Cache = (usize, usize, usize);

    fn forward(&self, _params: &ParameterSet, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, Self::Cache), NnError> {
        let (b, t, c) = x.dims3()?;
        let mut y = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                for ch in 0..c {
                    y[bi * c + ch] += x.data[(bi * t + ti) * c + ch];
                }
            }
        }
        y.iter_mut().for_each(|v| *v /= t as f64);
        Ok((Tensor { shape: vec![b, c], data: y }, (b, t, c)))
    }

    fn backward(&self, _params: &mut ParameterSet, cache: &Self::Cache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let (b, t, c) = *cache;
        let mut dx = vec![0.0; b * t * c];
        for bi in 0..b {
            for ti in 0..t {
                for ch in 0..c {
                    dx[(bi * t + ti) * c + ch] = grad_out.data[bi * c + ch] / t as f64;
                }
            }
        }
        Ok(Tensor { shape: vec![b, t, c], data: dx })
    }
}

/// Inverted dropout.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct DropoutCache {
    scale: Option<Vec<f64>>,
}

fn dropout_mask(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

impl Layer for Dropout {
    type Cache = DropoutCache;

    fn forward(&self, _params: &ParameterSet, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, DropoutCache), NnError> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(NnError::Config(format!("dropout rate {} outside [0, 1)", self.rate)));
        }
        if ctx.mode == Mode::Infer || self.rate == 0.0 {
            return Ok((x.clone(), DropoutCache { scale: None }));
        }
        let rng = ctx
            .rng
            .as_deref_mut()
            .ok_or_else(|| NnError::State("train-mode dropout needs an RNG".into()))?;
        let mask = dropout_mask(x.len(), self.rate, rng);
        let y = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok((Tensor { shape: x.shape.clone(), data: y }, DropoutCache { scale: Some(mask) }))
    }

    fn backward(&self, _params: &mut ParameterSet, cache: &DropoutCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        Ok(match &cache.scale {
            None => grad_out.clone(),
            Some(mask) => Tensor {
                shape: grad_out.shape.clone(),
                data: grad_out.data.iter().zip(mask).map(|(g, m)| g * m).collect(),
            },
        })
    }
}

/// Stand-alone dropout: identity in infer mode or at rate 0, otherwise
/// masks with probability `rate` and rescales survivors by `1 / (1 - rate)`.
pub fn dropout_apply(x: &Tensor, rate: f64, rng: &mut dyn RngCore, mode: Mode) -> Result<Tensor, NnError> {
    let mut ctx = ForwardCtx { mode, rng: Some(rng) };
    Dropout { rate }.forward(&ParameterSet::default(), x, &mut ctx).map(|(y, _)| y)
}

/// Layer normalisation over the last dimension with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim, eps: 1e-5 }
    }

    fn gamma(&self) -> String {
        format!("{}.gamma", self.name)
    }

    fn beta(&self) -> String {
        format!("{}.beta", self.name)
    }

    pub fn init(&self, params: &mut ParameterSet) {
        params.insert(self.gamma(), Tensor::full(&[self.dim], 1.0));
        params.insert(self.beta(), Tensor::zeros(&[self.dim]));
    }
}

impl Layer for LayerNorm {
    type Cache = LayerNormCache;

    fn forward(&self, params: &ParameterSet, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, LayerNormCache), NnError> {
        let d = self.dim;
        if x.last_dim() != d {
            return Err(NnError::Shape(format!("{}: expected last dim {d}, got {:?}", self.name, x.shape)));
        }
        let rows = x.len() / d;
        let gamma = &params.value(&self.gamma())?.data;
        let beta = &params.value(&self.beta())?.data;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = gamma[j] * h + beta[j];
            }
        }
        Ok((Tensor { shape: x.shape.clone(), data: y }, LayerNormCache { xhat, inv_std }))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &LayerNormCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let d = self.dim;
        let rows = cache.inv_std.len();
        {
            let gb = grad_mut(params, &self.beta())?;
            for r in 0..rows {
                for j in 0..d {
                    gb.data[j] += grad_out.data[r * d + j];
                }
            }
        }
        let (gamma, gg) = grad_and_value(params, &self.gamma())?;
        let mut dx = vec![0.0; rows * d];
        let df = d as f64;
        for r in 0..rows {
            let mut sum = 0.0;
            let mut sum_h = 0.0;
            for j in 0..d {
                let i = r * d + j;
                gg.data[j] += grad_out.data[i] * cache.xhat[i];
                let dh = grad_out.data[i] * gamma.data[j];
                sum += dh;
                sum_h += dh * cache.xhat[i];
            }
            for j in 0..d {
                let i = r * d + j;
                let dh = grad_out.data[i] * gamma.data[j];
                dx[i] = cache.inv_std[r] / df * (df * dh - sum - cache.xhat[i] * sum_h);
            }
        }
        Ok(Tensor { shape: grad_out.shape.clone(), data: dx })
    }
}

/// Conv1d -> optional batch norm -> ReLU -> max-pool(2, 2).
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv1d,
    pub norm: Option<BatchNorm1d>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    conv: Conv1dCache,
    pub norm: Option<BatchNormCache>,
    relu: ReluCache,
    pool: MaxPoolCache,
}

impl ConvBlock {
    pub fn new(name: &str, in_channels: usize, filters: usize, kernel: usize, batch_norm: bool) -> Self {
        ConvBlock {
            conv: Conv1d::new(format!("{name}.conv"), in_channels, filters, kernel),
            norm: batch_norm.then(|| BatchNorm1d::new(format!("{name}.bn"), filters)),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        self.conv.init(params, rng);
        if let Some(bn) = &self.norm {
            bn.init(params);
        }
    }

    pub fn update_running(&self, params: &mut ParameterSet, cache: &ConvBlockCache) -> Result<(), NnError> {
        match (&self.norm, &cache.norm) {
            (Some(bn), Some(c)) => bn.update_running(params, c),
            _ => Ok(()),
        }
    }
}

impl Layer for ConvBlock {
    type Cache = ConvBlockCache;

    fn forward(&self, params: &ParameterSet, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, ConvBlockCache), NnError> {
        let (h, conv) = self.conv.forward(params, x, ctx)?;
        let (h, norm) = match &self.norm {
            Some(bn) => {
                let (h, c) = bn.forward(params, &h, ctx)?;
                (h, Some(c))
            }
            None => (h, None),
        };
        let (h, relu) = Relu.forward(params, &h, ctx)?;
        let (h, pool) = MaxPool1d.forward(params, &h, ctx)?;
        Ok((h, ConvBlockCache { conv, norm, relu, pool }))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &ConvBlockCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let g = MaxPool1d.backward(params, &cache.pool, grad_out)?;
        let g = Relu.backward(params, &cache.relu, &g)?;
        let g = match (&self.norm, &cache.norm) {
            (Some(bn), Some(c)) => bn.backward(params, c, &g)?,
            _ => g,
        };
        self.conv.backward(params, &cache.conv, &g)
    }
}
