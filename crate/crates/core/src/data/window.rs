use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::table::DatasetTable;
use crate::error::{Error, Result};

/// Fixed-length windows `[N×W×F]` with one class per window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedBatch {
    pub window: usize,
    pub features: usize,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    /// Source rows of each window in the table it was cut from.
    pub provenance: Vec<Range<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowReport {
    pub windows: usize,
    pub skipped_segments: usize,
    pub dropped_rows: usize,
}

impl WindowedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn stride(&self) -> usize {
        self.window * self.features
    }

    /// The `W×F` values of window `i`.
    pub fn window_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Row `t` of window `i`.
    pub fn step(&self, i: usize, t: usize) -> &[f64] {
        let base = i * self.stride() + t * self.features;
        &self.values[base..base + self.features]
    }

    pub fn last_step(&self, i: usize) -> &[f64] {
        self.step(i, self.window - 1)
    }

    /// Windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowedBatch {
        let mut values = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            values.extend_from_slice(self.window_values(i));
        }
        WindowedBatch {
            window: self.window,
            features: self.features,
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }

    /// Every row of every window, row-major.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.features)
    }
}

/// Slides windows of `window` rows with step `stride` through each
/// (record, class) segment. Segments shorter than the window are skipped.
pub fn make_windows(table: &DatasetTable, window: usize, stride: usize) -> Result<(WindowedBatch, WindowReport)> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(format!("window {window} and stride {stride} must be positive")));
    }
    let f = table.num_features();
    let mut batch = WindowedBatch {
        window,
        features: f,
        values: Vec::new(),
        labels: Vec::new(),
        provenance: Vec::new(),
    };
    let mut report = WindowReport::default();
    for seg in table.segments() {
        if seg.len() < window {
            report.skipped_segments += 1;
            report.dropped_rows += seg.len();
            continue;
        }
        let count = (seg.len() - window) / stride + 1;
        for w in 0..count {
            let start = seg.start + w * stride;
            batch.values.extend_from_slice(&table.values()[start * f..(start + window) * f]);
            batch.labels.push(table.labels()[seg.start]);
            batch.provenance.push(start..start + window);
        }
        let covered = (count - 1) * stride + window;
        report.dropped_rows += seg.len() - covered.min(seg.len());
    }
    report.windows = batch.len();
    Ok((batch, report))
}
