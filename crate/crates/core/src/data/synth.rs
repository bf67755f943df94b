//! Seeded synthetic stand-ins for the public benchmark datasets.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::table::{DatasetTable, Feature};
use crate::error::{Error, Result};

/// Multichannel sinusoid recordings, one class per recording.
///
/// Channel `f` of a class-`k` recording is
/// `sin(2π t / (P_k·(1 + 0.5 f)) + φ) + s·t/len + noise`, with
/// `P_k = base_period·(1 + period_step·k)`, a random phase `φ` per
/// recording and channel, and a random trend slope `s ∈ [-trend, trend]`
/// per recording. Phase and slope are drawn from the same distributions for
/// every class, so a single reading carries no class information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSynth {
    pub seed: u64,
    pub features: usize,
    pub classes: usize,
    pub records_per_class: usize,
    pub record_len: usize,
    pub noise: f64,
    pub base_period: f64,
    pub period_step: f64,
    pub trend: f64,
}

impl Default for TemporalSynth {
    fn default() -> Self {
        Self {
            seed: 0,
            features: 3,
            classes: 4,
            records_per_class: 8,
            record_len: 256,
            noise: 0.3,
            base_period: 8.0,
            period_step: 0.5,
            trend: 0.5,
        }
    }
}

impl TemporalSynth {
    /// Period of channel `feature` for class `class`.
    pub fn period(&self, class: usize, feature: usize) -> f64 {
        self.base_period * (1.0 + self.period_step * class as f64) * (1.0 + 0.5 * feature as f64)
    }
}

pub fn synth_temporal(cfg: &TemporalSynth) -> Result<DatasetTable> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.features == 0 || cfg.records_per_class == 0 || cfg.record_len == 0 {
        return Err(Error::Config("features, records and record length must be positive".into()));
    }
    if !(cfg.base_period > 0.0 && cfg.noise >= 0.0 && cfg.trend >= 0.0 && cfg.period_step > 0.0) {
        return Err(Error::Config("periods must be positive; noise and trend non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.features;
    let rows = cfg.classes * cfg.records_per_class * cfg.record_len;
    let mut values = Vec::with_capacity(rows * f);
    let mut labels = Vec::with_capacity(rows);
    let mut records = Vec::with_capacity(rows);
    let mut record = 0;
    for _ in 0..cfg.records_per_class {
        for class in 0..cfg.classes {
            let phases: Vec<f64> = (0..f).map(|_| rng.random::<f64>() * TAU).collect();
            let slope = (rng.random::<f64>() * 2.0 - 1.0) * cfg.trend;
            for t in 0..cfg.record_len {
                for (j, phase) in phases.iter().enumerate() {
                    let omega = TAU / cfg.period(class, j);
                    let noise: f64 = rng.sample(StandardNormal);
                    values.push((omega * t as f64 + phase).sin() + slope * t as f64 / cfg.record_len as f64 + cfg.noise * noise);
                }
                labels.push(class);
                records.push(record);
            }
            record += 1;
        }
    }
    DatasetTable::new(
        (0..f).map(|j| Feature::continuous(format!("s{j}"))).collect(),
        (0..cfg.classes).map(|k| format!("class{k}")).collect(),
        values,
        labels,
        records,
    )
}

/// Independent rows whose class is a nonlinear function of sign agreement
/// between feature pairs plus a three-level categorical "speed" column.
///
/// Columns: `x0..x{F-2}` continuous standard normals, then `speed` with
/// levels `low`, `medium`, `high`. With `s_p = [x_{2p}·x_{2p+1} > 0]` for
/// the first `P = min(3, (F-1)/2)` pairs, the class is
/// `(speed + Σ_p 2^p s_p) mod K`. Rows are drawn until every class holds
/// its quota, so classes are balanced to within one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSynth {
    pub seed: u64,
    pub features: usize,
    pub classes: usize,
    pub rows: usize,
    pub noise: f64,
}

impl Default for TabularSynth {
    fn default() -> Self {
        Self {
            seed: 0,
            features: 5,
            classes: 4,
            rows: 2000,
            noise: 0.0,
        }
    }
}

pub const SPEED_LEVELS: [&str; 3] = ["low", "medium", "high"];

impl TabularSynth {
    pub fn pairs(&self) -> usize {
        ((self.features.saturating_sub(1)) / 2).min(3)
    }

    /// The generating rule on one row (`features` values, speed code last).
    pub fn rule(&self, row: &[f64]) -> usize {
        let speed = row[self.features - 1] as usize;
        let agree: usize = (0..self.pairs())
            .map(|p| usize::from(row[2 * p] * row[2 * p + 1] > 0.0) << p)
            .sum();
        (speed + agree) % self.classes
    }
}

pub fn synth_tabular(cfg: &TabularSynth) -> Result<DatasetTable> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.features < 3 {
        return Err(Error::Config("need at least 3 features (two continuous plus speed)".into()));
    }
    let reachable = (1usize << cfg.pairs()) + 2;
    if cfg.classes > reachable {
        return Err(Error::Config(format!(
            "{} features support at most {reachable} classes",
            cfg.features
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let f = cfg.features;
    let mut quota: Vec<usize> = (0..cfg.classes)
        .map(|k| cfg.rows / cfg.classes + usize::from(k < cfg.rows % cfg.classes))
        .collect();
    let mut values = Vec::with_capacity(cfg.rows * f);
    let mut labels = Vec::with_capacity(cfg.rows);
    let mut row = vec![0.0; f];
    while labels.len() < cfg.rows {
        for v in row.iter_mut().take(f - 1) {
            *v = rng.sample(StandardNormal);
        }
        row[f - 1] = rng.random_range(0..SPEED_LEVELS.len()) as f64;
        let class = cfg.rule(&row);
        if quota[class] == 0 {
            continue;
        }
        quota[class] -= 1;
        // measurement noise is added after labelling
        for v in row.iter_mut().take(f - 1) {
            *v += jitter.sample(&mut rng);
        }
        values.extend_from_slice(&row);
        labels.push(class);
    }
    let mut features: Vec<Feature> = (0..f - 1).map(|j| Feature::continuous(format!("x{j}"))).collect();
    features.push(Feature::categorical(
        "speed",
        SPEED_LEVELS.iter().map(|s| s.to_string()).collect(),
    ));
    DatasetTable::new(
        features,
        (0..cfg.classes).map(|k| format!("class{k}")).collect(),
        values,
        labels,
        vec![0; cfg.rows],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_labels_follow_rule() {
        let cfg = TabularSynth {
            rows: 500,
            ..TabularSynth::default()
        };
        let t = synth_tabular(&cfg).unwrap();
        for i in 0..t.len() {
            assert_eq!(cfg.rule(t.row(i)), t.labels()[i]);
        }
    }

    #[test]
    fn tabular_rejects_single_class() {
        let cfg = TabularSynth {
            classes: 1,
            ..TabularSynth::default()
        };
        assert!(synth_tabular(&cfg).is_err());
    }

    #[test]
    fn tabular_is_balanced() {
        let cfg = TabularSynth {
            rows: 10_000,
            classes: 3,
            ..TabularSynth::default()
        };
        let t = synth_tabular(&cfg).unwrap();
        for k in 0..3 {
            let n = t.labels().iter().filter(|&&l| l == k).count() as f64;
            assert!((n / 10_000.0 - 1.0 / 3.0).abs() < 0.05);
        }
    }

    #[test]
    fn temporal_is_deterministic() {
        let cfg = TemporalSynth {
            records_per_class: 2,
            record_len: 50,
            ..TemporalSynth::default()
        };
        let a = synth_temporal(&cfg).unwrap();
        let b = synth_temporal(&cfg).unwrap();
        let bits = |t: &DatasetTable| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.segments().len(), 8);
    }
}
