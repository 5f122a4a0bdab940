// SPDX-License-Identifier: Apache-2.0

//! Minimal differentiable compute for the two forecasting branches.
//!
//! Tensors are dense row-major `f64`. Layers are stateless descriptions whose
//! parameters live in a [`ParameterSet`]; `forward` returns the output plus a
//! cache that `backward` consumes to accumulate parameter gradients and return
//! the input gradient. Sequence tensors use the `[batch, time, channels]`
//! layout.

mod adam;
mod attention;
mod encoder;
mod layers;
mod tensor;

pub use adam::AdamState;
pub use attention::{positional_encoding, softmax_rows, AttentionCache, MultiHeadAttention};
pub use encoder::{EncoderBlock, EncoderCache};
pub use layers::{
    dropout_apply, BatchNorm1d, BatchNormCache, Conv1d, ConvBlock, ConvBlockCache, Dense,
    DenseCache, Dropout, DropoutCache, GlobalAvgPool, LayerNorm, LayerNormCache, MaxPool1d,
    MaxPoolCache, Relu, ReluCache,
};
pub use tensor::{ParameterSet, Tensor};

use rand::RngCore;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("unknown parameter `{0}`")]
    MissingParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-call forward context: mode and the dropout RNG stream.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> ForwardCtx<'a> {
    pub fn infer() -> Self {
        ForwardCtx { mode: Mode::Infer, rng: None }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        ForwardCtx { mode: Mode::Train, rng: Some(rng) }
    }
}

/// A differentiable layer.
pub trait Layer {
    type Cache;

    fn forward(
        &self,
        params: &ParameterSet,
        x: &Tensor,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Tensor, Self::Cache), NnError>;

    /// Accumulates parameter gradients into `params` and returns the gradient
    /// with respect to the layer input.
    fn backward(
        &self,
        params: &mut ParameterSet,
        cache: &Self::Cache,
        grad_out: &Tensor,
    ) -> Result<Tensor, NnError>;
}

#[cfg(test)]
mod tests;
