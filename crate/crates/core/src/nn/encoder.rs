// SPDX-License-Identifier: Apache-2.0

use super::{
    Dense, DenseCache, Dropout, DropoutCache, ForwardCtx, Layer, LayerNorm, LayerNormCache,
    AttentionCache, MultiHeadAttention, NnError, ParameterSet, Relu, ReluCache, Tensor,
};
use rand::Rng;

/// Post-norm encoder block:
/// `h = LN1(x + drop(MHA(x)))`, `y = LN2(h + drop(W2 relu(W1 h)))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub norm2: LayerNorm,
    pub dropout: Dropout,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub attention: AttentionCache,
    drop1: DropoutCache,
    norm1: LayerNormCache,
    ff1: DenseCache,
    relu: ReluCache,
    ff2: DenseCache,
    drop2: DropoutCache,
    norm2: LayerNormCache,
}

impl EncoderBlock {
    pub fn new(name: &str, d_model: usize, n_heads: usize, ff_dim: usize, dropout: f64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(NnError::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(EncoderBlock {
            attention: MultiHeadAttention::new(&format!("{name}.attn"), d_model, n_heads)?,
            norm1: LayerNorm::new(format!("{name}.ln1"), d_model),
            ff1: Dense::new(format!("{name}.ff1"), d_model, ff_dim),
            ff2: Dense::new(format!("{name}.ff2"), ff_dim, d_model),
            norm2: LayerNorm::new(format!("{name}.ln2"), d_model),
            dropout: Dropout { rate: dropout },
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        self.attention.init(params, rng);
        self.norm1.init(params);
        self.ff1.init(params, rng);
        self.ff2.init(params, rng);
        self.norm2.init(params);
    }
}

impl Layer for EncoderBlock {
    type Cache = EncoderCache;

    fn forward(&self, params: &ParameterSet, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, EncoderCache), NnError> {
        let (a, attention) = self.attention.forward(params, x, ctx)?;
        let (mut a, drop1) = self.dropout.forward(params, &a, ctx)?;
        a.add_assign(x);
        let (h, norm1) = self.norm1.forward(params, &a, ctx)?;
        let (f, ff1) = self.ff1.forward(params, &h, ctx)?;
        let (f, relu) = Relu.forward(params, &f, ctx)?;
        let (f, ff2) = self.ff2.forward(params, &f, ctx)?;
        let (mut f, drop2) = self.dropout.forward(params, &f, ctx)?;
        f.add_assign(&h);
        let (y, norm2) = self.norm2.forward(params, &f, ctx)?;
        Ok((y, EncoderCache { attention, drop1, norm1, ff1, relu, ff2, drop2, norm2 }))
    }

    fn backward(&self, params: &mut ParameterSet, cache: &EncoderCache, grad_out: &Tensor) -> Result<Tensor, NnError> {
        let g = self.norm2.backward(params, &cache.norm2, grad_out)?;
        let mut dh = g.clone();
        let g = self.dropout.backward(params, &cache.drop2, &g)?;
        let g = self.ff2.backward(params, &cache.ff2, &g)?;
        let g = Relu.backward(params, &cache.relu, &g)?;
        dh.add_assign(&self.ff1.backward(params, &cache.ff1, &g)?);
        let g = self.norm1.backward(params, &cache.norm1, &dh)?;
        let mut dx = g.clone();
        let g = self.dropout.backward(params, &cache.drop1, &g)?;
        dx.add_assign(&self.attention.backward(params, &cache.attention, &g)?);
        Ok(dx)
    }
}
