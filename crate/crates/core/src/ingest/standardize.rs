// SPDX-License-Identifier: Apache-2.0

use super::{AlignedFrame, Feature, IngestError, FEATURE_COUNT};
use crate::time::HourRange;
use serde::{Deserialize, Serialize};

/// Per-column affine scaling fitted on the training rows only.
///
/// Uses the population standard deviation. Non-continuous columns carry
/// mean 0 and std 1 so the transform is the identity for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; FEATURE_COUNT],
    pub std: [f64; FEATURE_COUNT],
    pub fitted_on: HourRange,
}

impl Standardizer {
    pub fn transform(&self, f: Feature, x: f64) -> f64 {
        (x - self.mean[f.index()]) / self.std[f.index()]
    }

    pub fn inverse(&self, f: Feature, z: f64) -> f64 {
        z * self.std[f.index()] + self.mean[f.index()]
    }

    pub fn demand_mean(&self) -> f64 {
        self.mean[Feature::Demand.index()]
    }

    pub fn demand_std(&self) -> f64 {
        self.std[Feature::Demand.index()]
    }
}

/// Fits means and population standard deviations of the continuous columns
/// over complete training rows.
///
/// A zero-variance column is an error unless `unit_std_for_constant` is set,
/// in which case that column gets std 1.
pub fn fit_standardizer(
    frame: &AlignedFrame,
    train: HourRange,
    unit_std_for_constant: bool,
) -> Result<Standardizer, IngestError> {
    let mut mean = [0.0; FEATURE_COUNT];
    let mut std = [1.0; FEATURE_COUNT];
    for f in Feature::CONTINUOUS {
        let values: Vec<f64> = (0..frame.len())
            .filter(|&r| train.contains(frame.timestamps[r]) && !frame.is_missing(r, f))
            .map(|r| frame.value(r, f))
            .collect();
        if values.is_empty() {
            return Err(IngestError::Split(format!(
                "training range has no observed `{f}` values"
            )));
        }
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        mean[f.index()] = m;
        std[f.index()] = if s > 0.0 && s.is_finite() {
            s
        } else if unit_std_for_constant {
            1.0
        } else {
            return Err(IngestError::ZeroVariance(f));
        };
    }
    Ok(Standardizer {
        mean,
        std,
        fitted_on: train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Hour;
    use proptest::prelude::*;

    fn frame(values: &[f64]) -> AlignedFrame {
        let n = values.len();
        let h0 = Hour::from_ymdh(2024, 1, 1, 0).unwrap();
        let mut columns = vec![vec![0.0; n]; FEATURE_COUNT];
        for f in Feature::CONTINUOUS {
            columns[f.index()] = values.iter().map(|v| v + f.index() as f64).collect();
        }
        AlignedFrame {
            timestamps: (0..n as i64).map(|i| h0.offset(i)).collect(),
            columns,
            missing: vec![vec![false; n]; FEATURE_COUNT],
        }
    }

    fn all(f: &AlignedFrame) -> HourRange {
        HourRange::new(f.timestamps[0], f.timestamps[f.len() - 1].offset(1))
    }

    #[test]
    fn population_std() {
        let f = frame(&[1.0, 2.0, 3.0]);
        let s = fit_standardizer(&f, all(&f), false).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((s.std[0] - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn constant_column_rejected() {
        let f = frame(&[5.0, 5.0, 5.0]);
        assert!(matches!(fit_standardizer(&f, all(&f), false), Err(IngestError::ZeroVariance(Feature::Demand))));
        let s = fit_standardizer(&f, all(&f), true).unwrap();
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn training_column_becomes_unit() {
        let vals: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 * 13.7 - 400.0).collect();
        let f = frame(&vals);
        let s = fit_standardizer(&f, all(&f), false).unwrap();
        let z: Vec<f64> = vals.iter().map(|&v| s.transform(Feature::Demand, v)).collect();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let sd = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        assert!(m.abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn only_training_rows_used() {
        let f = frame(&[1.0, 2.0, 3.0, 1000.0]);
        let train = HourRange::new(f.timestamps[0], f.timestamps[3]);
        let s = fit_standardizer(&f, train, false).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn round_trip(x in -1e5f64..1e5, m in -1e4f64..1e4, sd in 1e-3f64..1e4) {
            let mut s = Standardizer { mean: [0.0; FEATURE_COUNT], std: [1.0; FEATURE_COUNT], fitted_on: HourRange::new(Hour(0), Hour(1)) };
            s.mean[2] = m;
            s.std[2] = sd;
            let back = s.inverse(Feature::AirTemp, s.transform(Feature::AirTemp, x));
            prop_assert!((back - x).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }
}
