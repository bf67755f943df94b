//! Confusion-matrix accumulation and macro-averaged classification metrics.
//!
//! Conventions:
//! - `cm[i][j]` counts samples of true class `i` predicted as class `j`.
//! - A per-class precision or recall term with a zero denominator counts as
//!   0 and still contributes to the average over all `K` classes.
//! - Macro-F1 is the harmonic mean of macro precision and macro recall,
//!   not the mean of per-class F1 scores. The two generally differ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// Per-class one-vs-rest counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Builds a matrix from explicit rows.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix rows must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn update(&mut self, y_true: &[usize], y_pred: &[usize]) -> Result<()> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        if let Some(bad) = y_true.iter().chain(y_pred).find(|&&l| l >= self.k) {
            return Err(Error::Index(format!("label {bad} outside {} classes", self.k)));
        }
        for (&t, &p) in y_true.iter().zip(y_pred) {
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Entrywise sum with a matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("merge {} with {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn class_counts(&self, k: usize) -> ClassCounts {
        assert!(k < self.k, "class {k} outside {}", self.k);
        let tp = self.get(k, k);
        let col: u64 = (0..self.k).map(|i| self.get(i, k)).sum();
        let row: u64 = (0..self.k).map(|j| self.get(k, j)).sum();
        let fp = col - tp;
        let fn_ = row - tp;
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::UndefinedMetric("no scored samples"))
        } else {
            Ok(())
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.trace() as f64 / self.total() as f64)
    }

    pub fn macro_precision(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.macro_mean(|c| ratio(c.tp, c.tp + c.fp)))
    }

    pub fn macro_recall(&self) -> Result<f64> {
        self.nonempty()?;
        Ok(self.macro_mean(|c| ratio(c.tp, c.tp + c.fn_)))
    }

    pub fn macro_f1(&self) -> Result<f64> {
        Ok(harmonic(self.macro_precision()?, self.macro_recall()?))
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let precision = self.macro_precision()?;
        let recall = self.macro_recall()?;
        Ok(Metrics {
            accuracy: self.accuracy()?,
            precision,
            recall,
            f1: harmonic(precision, recall),
        })
    }

    fn macro_mean(&self, term: impl Fn(ClassCounts) -> f64) -> f64 {
        (0..self.k).map(|k| term(self.class_counts(k))).sum::<f64>() / self.k as f64
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}
