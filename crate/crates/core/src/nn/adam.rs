// SPDX-License-Identifier: Apache-2.0

use super::{NnError, ParameterSet};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(NnError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(lr > 0.0) || !(eps > 0.0) {
            return Err(NnError::Config("Adam lr and eps must be positive".into()));
        }
        Ok(AdamState { lr, beta1, beta2, eps, step: 0, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    /// `lr = 1e-3`, `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn with_lr(lr: f64) -> Result<Self, NnError> {
        AdamState::new(lr, 0.9, 0.999, 1e-8)
    }

    /// Applies one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<(), NnError> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, value) in params.values.iter_mut() {
            let grad = params
                .grads
                .get(name)
                .ok_or_else(|| NnError::MissingParameter(name.clone()))?;
            if grad.shape != value.shape {
                return Err(NnError::Shape(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; value.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; value.len()]);
            for i in 0..value.len() {
                let g = grad.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
