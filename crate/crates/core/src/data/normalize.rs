use serde::{Deserialize, Serialize};

use super::table::{Feature, FeatureKind};
use super::window::WindowedBatch;

/// Below this standard deviation a feature is only centered.
pub const MIN_STD: f64 = 1e-12;

/// Per-feature z-score statistics fitted on training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub continuous: Vec<bool>,
    /// Continuous features whose spread fell below [`MIN_STD`].
    pub flagged: Vec<usize>,
}

impl Normalizer {
    pub fn fit(train: &WindowedBatch, features: &[Feature]) -> Self {
        let f = train.features;
        let continuous: Vec<bool> = features.iter().map(|c| c.kind == FeatureKind::Continuous).collect();
        let n = (train.values.len() / f.max(1)) as f64;
        let mut mean = vec![0.0; f];
        for row in train.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n.max(1.0);
        }
        let mut var = vec![0.0; f];
        for row in train.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n.max(1.0)).sqrt()).collect();
        let flagged = (0..f).filter(|&j| continuous[j] && std[j] < MIN_STD).collect();
        for j in 0..f {
            if !continuous[j] {
                mean[j] = 0.0;
            }
        }
        Self {
            mean,
            std,
            continuous,
            flagged,
        }
    }

    pub fn apply(&self, batch: &mut WindowedBatch) {
        let f = batch.features;
        for row in batch.values.chunks_mut(f) {
            self.apply_row(row);
        }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            if !self.continuous[j] {
                continue;
            }
            *v -= self.mean[j];
            if self.std[j] >= MIN_STD {
                *v /= self.std[j];
            }
        }
    }
}
