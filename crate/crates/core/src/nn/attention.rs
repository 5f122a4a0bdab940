// SPDX-License-Identifier: Apache-2.0

use super::layers::{Dense, DenseCache};
use crate::linalg::gemm_strided;
use super::{ForwardCtx, Layer, NnError, ParameterSet, Tensor};
use rand::Rng;

/// Sinusoidal position table, `[T, d_model]`:
/// `PE(pos, 2i) = sin(pos / 10000^(2i / d))`, `PE(pos, 2i + 1) = cos(...)`.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Tensor, NnError> {
    if d_model % 2 != 0 {
        return Err(NnError::Config(format!("d_model must be even, got {d_model}")));
    }
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, d_model], data)
}

/// Numerically stable row-wise softmax of a `rows x cols` matrix, in place.
pub fn softmax_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Multi-head scaled dot-product self-attention,
/// `softmax(Q K^T / sqrt(d_k)) V` per head, heads concatenated and projected.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Attention weights, `[B, heads, T, T]`.
    pub weights: Vec<f64>,
    q_cache: DenseCache,
    k_cache: DenseCache,
    v_cache: DenseCache,
    o_cache: DenseCache,
    dims: (usize, usize),
}

impl MultiHeadAttention {
    pub fn new(name: &str, d_model: usize, n_heads: usize) -> Result<Self, NnError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(NnError::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(MultiHeadAttention {
            name: name.to_string(),
            d_model,
            n_heads,
            query: Dense::new(format!("{name}.query"), d_model, d_model),
            key: Dense::new(format!("{name}.key"), d_model, d_model),
            value: Dense::new(format!("{name}.value"), d_model, d_model),
            output: Dense::new(format!("{name}.output"), d_model, d_model),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        for d in [&self.query, &self.key, &self.value, &self.output] {
            d.init(params, rng);
        }
    }

    /// Per-head attention without the output projection; returns the
    /// concatenated head outputs and the attention weights.
    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, b: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.d_model;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut concat = vec![0.0; b * t * d];
        let mut weights = vec![0.0; b * self.n_heads * t * t];
        for bi in 0..b {
            for h in 0..self.n_heads {
                let off = bi * t * d + h * dk;
                let w = &mut weights[(bi * self.n_heads + h) * t * t..(bi * self.n_heads + h + 1) * t * t];
                // S = Q_h K_h^T / sqrt(d_k)
                gemm_strided((t, dk, t), scale, (&q.data[off..], d, 1), (&k.data[off..], 1, d), 0.0, (w, t, 1));
                softmax_rows(w, t);
                gemm_strided((t, t, dk), 1.0, (w, t, 1), (&v.data[off..], d, 1), 0.0, (&mut concat[off..], d, 1));
            }
        }
        (concat, weights)
    }
}

impl Layer for MultiHeadAttention {
    type Cache = AttentionCache;

    fn forward(&self, params: &ParameterSet, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, AttentionCache), NnError> {
        let (b, t, d) = x.dims3()?;
        if d != self.d_model {
            return Err(NnError::Shape(format!("{}: expected d_model {}, got {d}", self.name, self.d_model)));
        }
        let (q, q_cache) = self.query.forward(params, x, ctx)?;
        let (k, k_cache) = self.key.forward(params, x, ctx)?;
        let (v, v_cache) = self.value.forward(params, x, ctx)?;
        let (concat, weights) = self.attend(&q, &k, &v, b, t);
        let concat = Tensor { shape: vec![b, t, d], data: concat };
        let (y, o_cache) = self.output.forward(params, &concat, ctx)?;
        Ok((y, AttentionCache { q, k, v, weights, q_cache, k_cache, v_cache, o_cache, dims: (b, t) }))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &AttentionCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let (b, t) = cache.dims;
        let d = self.d_model;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let dconcat = self.output.backward(params, &cache.o_cache, grad_out)?;
        let mut dq = vec![0.0; b * t * d];
        let mut dk_ = vec![0.0; b * t * d];
        let mut dv = vec![0.0; b * t * d];
        let mut ds = vec![0.0; t * t];
        for bi in 0..b {
            for h in 0..self.n_heads {
                let off = bi * t * d + h * dk;
                let w = &cache.weights[(bi * self.n_heads + h) * t * t..(bi * self.n_heads + h + 1) * t * t];
                let d_o = &dconcat.data[off..];
                // dP = dO V^T, dV = P^T dO
                gemm_strided((t, dk, t), 1.0, (d_o, d, 1), (&cache.v.data[off..], 1, d), 0.0, (&mut ds, t, 1));
                gemm_strided((t, t, dk), 1.0, (w, 1, t), (d_o, d, 1), 0.0, (&mut dv[off..], d, 1));
                // softmax backward: dS = P * (dP - rowsum(dP * P)), scaled
                for (dp_row, w_row) in ds.chunks_mut(t).zip(w.chunks(t)) {
                    let dot: f64 = dp_row.iter().zip(w_row).map(|(a, b)| a * b).sum();
                    for (g, p) in dp_row.iter_mut().zip(w_row) {
                        *g = p * (*g - dot) * scale;
                    }
                }
                gemm_strided((t, t, dk), 1.0, (&ds, t, 1), (&cache.k.data[off..], d, 1), 0.0, (&mut dq[off..], d, 1));
                gemm_strided((t, t, dk), 1.0, (&ds, 1, t), (&cache.q.data[off..], d, 1), 0.0, (&mut dk_[off..], d, 1));
            }
        }
        let shape = vec![b, t, d];
        let mut dx = self.query.backward(params, &cache.q_cache, &Tensor { shape: shape.clone(), data: dq })?;
        dx.add_assign(&self.key.backward(params, &cache.k_cache, &Tensor { shape: shape.clone(), data: dk_ })?);
        dx.add_assign(&self.value.backward(params, &cache.v_cache, &Tensor { shape, data: dv })?);
        Ok(dx)
    }
}
