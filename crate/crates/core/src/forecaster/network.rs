// SPDX-License-Identifier: Apache-2.0

use super::{BranchConfig, ForecastError};
use crate::ingest::{FEATURE_COUNT, WINDOW_HOURS, WINDOW_LEN};
use crate::nn::{
    positional_encoding, ConvBlock, ConvBlockCache, Dense, DenseCache, Dropout, DropoutCache,
    EncoderBlock, EncoderCache, ForwardCtx, GlobalAvgPool, Layer, NnError, ParameterSet, Relu,
    ReluCache, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `dense(embedding) -> relu -> dropout -> dense(1)`, linear output.
#[derive(Debug, Clone)]
struct Head {
    fc: Dense,
    dropout: Dropout,
    out: Dense,
}

#[derive(Debug, Clone)]
struct HeadCache {
    fc: DenseCache,
    relu: ReluCache,
    dropout: DropoutCache,
    out: DenseCache,
}

impl Head {
    fn new(input: usize, embedding: usize, dropout: f64) -> Self {
        Head {
            fc: Dense::new("head.fc", input, embedding),
            dropout: Dropout { rate: dropout },
            out: Dense::new("head.out", embedding, 1),
        }
    }

    fn init(&self, params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        self.fc.init(params, rng);
        self.out.init(params, rng);
    }

    fn forward(&self, p: &ParameterSet, x: &Tensor, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor, HeadCache), NnError> {
        let (h, fc) = self.fc.forward(p, x, ctx)?;
        let (h, relu) = Relu.forward(p, &h, ctx)?;
        let (h, dropout) = self.dropout.forward(p, &h, ctx)?;
        let (y, out) = self.out.forward(p, &h, ctx)?;
        Ok((y, HeadCache { fc, relu, dropout, out }))
    }

    fn backward(&self, p: &mut ParameterSet, c: &HeadCache, g: &Tensor) -> Result<Tensor, NnError> {
        let g = self.out.backward(p, &c.out, g)?;
        let g = self.dropout.backward(p, &c.dropout, &g)?;
        let g = Relu.backward(p, &c.relu, &g)?;
        self.fc.backward(p, &c.fc, &g)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Cnn { blocks: Vec<ConvBlock> },
    Transformer { input: Dense, pe: Tensor, blocks: Vec<EncoderBlock> },
}

/// Intermediate state of one forward pass, consumed by [`Branch::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    body: BodyTape,
    pool: (usize, usize, usize),
    head: HeadCache,
    batch: usize,
}

#[derive(Debug, Clone)]
enum BodyTape {
    Cnn(Vec<ConvBlockCache>),
    Transformer { input: DenseCache, blocks: Vec<EncoderCache> },
}

/// A branch architecture together with its parameters.
#[derive(Debug, Clone)]
pub struct Branch {
    pub config: BranchConfig,
    pub params: ParameterSet,
    body: Body,
    head: Head,
}

impl Branch {
    /// Builds the architecture and initialises parameters from `seed`.
    /// Weights are fan-in scaled uniform, biases and norm shifts zero, norm
    /// gains one.
    pub fn build(config: &BranchConfig, seed: u64) -> Result<Branch, ForecastError> {
        let mut branch = Branch::architecture(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::default();
        match &branch.body {
            Body::Cnn { blocks } => blocks.iter().for_each(|b| b.init(&mut params, &mut rng)),
            Body::Transformer { input, blocks, .. } => {
                input.init(&mut params, &mut rng);
                blocks.iter().for_each(|b| b.init(&mut params, &mut rng));
            }
        }
        branch.head.init(&mut params, &mut rng);
        branch.params = params;
        Ok(branch)
    }

    /// Reattaches stored parameters to the architecture described by `config`.
    pub fn from_parts(config: &BranchConfig, mut params: ParameterSet) -> Result<Branch, ForecastError> {
        let reference = Branch::build(config, 0)?;
        for (name, t) in &reference.params.values {
            match params.values.get(name) {
                Some(v) if v.shape == t.shape => {}
                Some(v) => {
                    return Err(ForecastError::Shape(format!("parameter {name}: stored {:?}, expected {:?}", v.shape, t.shape)))
                }
                None => return Err(NnError::MissingParameter(name.clone()).into()),
            }
        }
        if params.values.len() != reference.params.values.len() {
            return Err(ForecastError::Shape("stored parameters do not match the architecture".into()));
        }
        for name in reference.params.buffers.keys() {
            if !params.buffers.contains_key(name) {
                return Err(NnError::MissingParameter(name.clone()).into());
            }
        }
        params.reset_grads();
        Ok(Branch { params, ..reference })
    }

    fn architecture(config: &BranchConfig) -> Result<Branch, ForecastError> {
        config.validate()?;
        let (body, head) = match config {
            BranchConfig::Cnn(c) => {
                let blocks = (0..c.blocks)
                    .map(|i| {
                        let input = if i == 0 { FEATURE_COUNT } else { c.filters };
                        ConvBlock::new(&format!("conv{i}"), input, c.filters, c.kernel, c.batch_norm)
                    })
                    .collect();
                (Body::Cnn { blocks }, Head::new(c.filters, c.embedding_dim, c.dropout))
            }
            BranchConfig::Transformer(c) => {
                let blocks = (0..c.encoder_blocks)
                    .map(|i| EncoderBlock::new(&format!("enc{i}"), c.d_model, c.n_heads, c.ff_dim, c.dropout))
                    .collect::<Result<_, _>>()?;
                let body = Body::Transformer {
                    input: Dense::new("input", FEATURE_COUNT, c.d_model),
                    pe: positional_encoding(WINDOW_HOURS, c.d_model)?,
                    blocks,
                };
                (body, Head::new(c.d_model, c.embedding_dim, c.dropout))
            }
        };
        Ok(Branch { config: config.clone(), params: ParameterSet::default(), body, head })
    }

    /// Forward pass over `inputs`, a flat batch of `24 x 13` windows.
    /// Returns one standardized output per window.
    pub fn forward(&self, inputs: &[f64], ctx: &mut ForwardCtx<'_>) -> Result<(Vec<f64>, Tape), ForecastError> {
        if inputs.is_empty() || inputs.len() % WINDOW_LEN != 0 {
            return Err(ForecastError::Shape(format!(
                "input length {} is not a positive multiple of {WINDOW_LEN}",
                inputs.len()
            )));
        }
        let batch = inputs.len() / WINDOW_LEN;
        let x = Tensor::new(vec![batch, WINDOW_HOURS, FEATURE_COUNT], inputs.to_vec())?;
        let p = &self.params;
        let (h, body) = match &self.body {
            Body::Cnn { blocks } => {
                let mut h = x;
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (next, c) = b.forward(p, &h, ctx)?;
                    h = next;
                    caches.push(c);
                }
                (h, BodyTape::Cnn(caches))
            }
            Body::Transformer { input, pe, blocks } => {
                let (mut h, input_cache) = input.forward(p, &x, ctx)?;
                let d = pe.shape[1];
                for (i, v) in h.data.iter_mut().enumerate() {
                    *v += pe.data[i % (WINDOW_HOURS * d)];
                }
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (next, c) = b.forward(p, &h, ctx)?;
                    h = next;
                    caches.push(c);
                }
                (h, BodyTape::Transformer { input: input_cache, blocks: caches })
            }
        };
        let (pooled, pool) = GlobalAvgPool.forward(p, &h, ctx)?;
        let (y, head) = self.head.forward(p, &pooled, ctx)?;
        Ok((y.data, Tape { body, pool, head, batch }))
    }

    /// Accumulates parameter gradients for `d loss / d output`.
    pub fn backward(&mut self, tape: &Tape, grad_out: &[f64]) -> Result<(), ForecastError> {
        if grad_out.len() != tape.batch {
            return Err(ForecastError::Shape(format!("{} output gradients for a batch of {}", grad_out.len(), tape.batch)));
        }
        let p = &mut self.params;
        let g = Tensor::new(vec![tape.batch, 1], grad_out.to_vec())?;
        let g = self.head.backward(p, &tape.head, &g)?;
        let mut g = GlobalAvgPool.backward(p, &tape.pool, &g)?;
        match (&self.body, &tape.body) {
            (Body::Cnn { blocks }, BodyTape::Cnn(caches)) => {
                for (b, c) in blocks.iter().zip(caches).rev() {
                    g = b.backward(p, c, &g)?;
                }
            }
            (Body::Transformer { input, blocks, .. }, BodyTape::Transformer { input: ic, blocks: caches }) => {
                for (b, c) in blocks.iter().zip(caches).rev() {
                    g = b.backward(p, c, &g)?;
                }
                input.backward(p, ic, &g)?;
            }
            _ => return Err(NnError::State("tape recorded by a different architecture".into()).into()),
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the batch-norm running buffers.
    pub fn update_running(&mut self, tape: &Tape) -> Result<(), ForecastError> {
        if let (Body::Cnn { blocks }, BodyTape::Cnn(caches)) = (&self.body, &tape.body) {
            for (b, c) in blocks.iter().zip(caches) {
                b.update_running(&mut self.params, c)?;
            }
        }
        Ok(())
    }

    /// Infer-mode outputs, evaluated in chunks.
    pub fn infer(&self, inputs: &[f64]) -> Result<Vec<f64>, ForecastError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(inputs.len() / WINDOW_LEN);
        for chunk in inputs.chunks(CHUNK * WINDOW_LEN) {
            out.extend(self.forward(chunk, &mut ForwardCtx::infer())?.0);
        }
        Ok(out)
    }
}
