use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::Variant;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub rows: usize,
    pub train_windows: usize,
    pub eval_windows: usize,
    pub test_windows: usize,
    pub dropped_rows: usize,
    pub skipped_segments: usize,
    /// Continuous features with (near) zero training spread.
    pub flagged_features: Vec<String>,
    /// Continuous features that collapsed to a single bin.
    pub degenerate_bins: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, train_loss: f64, m: Metrics) -> Self {
        Self {
            epoch,
            train_loss,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub config: RunConfig,
    pub data: DataSummary,
    pub epochs: Vec<EpochRecord>,
    /// Mean of each metric over the last `summary_epochs` epochs.
    pub summary: Metrics,
    pub summary_epochs: usize,
    /// Test-split metrics after training (validation mode only).
    pub final_test: Option<Metrics>,
    pub diverged: Option<String>,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn recompute_summary(&self) -> Metrics {
        let n = self.summary_epochs.min(self.epochs.len());
        let tail = &self.epochs[self.epochs.len() - n..];
        let mean = |f: fn(&EpochRecord) -> f64| tail.iter().map(f).sum::<f64>() / n.max(1) as f64;
        Metrics {
            accuracy: mean(|e| e.accuracy),
            precision: mean(|e| e.precision),
            recall: mean(|e| e.recall),
            f1: mean(|e| e.f1),
        }
    }

    pub fn final_epoch(&self) -> Option<Metrics> {
        self.epochs.last().map(EpochRecord::metrics)
    }

    /// Parses a report and checks that its summary matches the per-epoch
    /// series.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: TrainReport = serde_json::from_str(text)?;
        if r.diverged.is_none() {
            let want = r.recompute_summary();
            let pairs = [
                (want.accuracy, r.summary.accuracy),
                (want.precision, r.summary.precision),
                (want.recall, r.summary.recall),
                (want.f1, r.summary.f1),
            ];
            if pairs.iter().any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(Error::Data("report summary disagrees with its per-epoch metrics".into()));
            }
        }
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        for e in &self.epochs {
            w.serialize(e).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Writes the JSON report to `path` and the per-epoch CSV next to it.
pub fn emit_report(report: &TrainReport, path: &Path) -> Result<()> {
    write_atomic(path, report.to_json()?.as_bytes())?;
    write_atomic(&path.with_extension("csv"), report.to_csv()?.as_bytes())
}
