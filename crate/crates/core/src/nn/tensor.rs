// SPDX-License-Identifier: Apache-2.0

use super::NnError;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-limit..=limit)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Interprets the tensor as `[batch, time, channels]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize), NnError> {
        match self.shape[..] {
            [b, t, c] => Ok((b, t, c)),
            _ => Err(NnError::Shape(format!("expected [batch, time, channels], got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NnError::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Named trainable tensors with matching gradients, plus non-trainable
/// buffers (batch-norm running statistics). Gradients are not serialized;
/// call [`ParameterSet::reset_grads`] after deserializing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub values: BTreeMap<String, Tensor>,
    #[serde(skip)]
    pub grads: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads.insert(name.clone(), Tensor::zeros(&value.shape));
        self.values.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NnError> {
        self.values
            .get(name)
            .ok_or_else(|| NnError::MissingParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.values
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, NnError> {
        self.grads
            .get(name)
            .ok_or_else(|| NnError::MissingParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor, NnError> {
        self.buffers
            .get(name)
            .ok_or_else(|| NnError::MissingParameter(name.to_string()))
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Rebuilds zeroed gradients matching the current values.
    pub fn reset_grads(&mut self) {
        self.grads = self
            .values
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect();
    }

    pub fn parameter_count(&self) -> usize {
        self.values.values().map(Tensor::len).sum()
    }

    /// Every gradient has its parameter's shape.
    pub fn is_consistent(&self) -> bool {
        self.values.len() == self.grads.len()
            && self
                .values
                .iter()
                .all(|(k, v)| self.grads.get(k).is_some_and(|g| g.shape == v.shape))
    }
}
