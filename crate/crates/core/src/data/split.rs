use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::DatasetTable;
use crate::error::{Error, Result};

/// Granularity at which rows move between train and test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SplitUnit {
    /// Window-sized chunks (single rows when the window is 1).
    Window,
    /// Contiguous blocks of `windows` window lengths.
    Block { windows: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: u32,
    pub test: u32,
    pub stratify: bool,
    pub seed: u64,
    pub unit: SplitUnit,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 8,
            test: 2,
            stratify: true,
            seed: 0,
            unit: SplitUnit::Window,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::Config("train share of the split ratio must be positive".into()));
        }
        if let SplitUnit::Block { windows: 0 } = self.unit {
            return Err(Error::Config("block length must be positive".into()));
        }
        Ok(())
    }

    /// Rows per split unit for a given window length.
    pub fn unit_len(&self, window: usize) -> usize {
        match self.unit {
            SplitUnit::Window => window.max(1),
            SplitUnit::Block { windows } => windows * window.max(1),
        }
    }

    /// Number of `n` units that go to the training side (nearest integer,
    /// halves rounded up).
    pub fn train_count(&self, n: usize) -> usize {
        let (a, b) = (self.train as usize, self.test as usize);
        (2 * n * a + a + b) / (2 * (a + b))
    }
}

/// Cuts every (record, class) segment into consecutive chunks of at most
/// `unit_len` rows.
pub fn units(table: &DatasetTable, unit_len: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    for seg in table.segments() {
        let mut s = seg.start;
        while s < seg.end {
            let e = (s + unit_len).min(seg.end);
            out.push(s..e);
            s = e;
        }
    }
    out
}

fn groups(table: &DatasetTable, units: &[Range<usize>], stratify: bool) -> Vec<Vec<usize>> {
    if !stratify {
        return vec![(0..units.len()).collect()];
    }
    let mut g = vec![Vec::new(); table.num_classes()];
    for (i, u) in units.iter().enumerate() {
        g[table.labels()[u.start]].push(i);
    }
    g
}

/// Splits `table` into disjoint train and test tables. Units keep their
/// original order on each side and become separate records.
pub fn split(table: &DatasetTable, cfg: &SplitConfig, window: usize) -> Result<(DatasetTable, DatasetTable)> {
    cfg.validate()?;
    let units = units(table, cfg.unit_len(window));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut group) in groups(table, &units, cfg.stratify).into_iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        group.shuffle(&mut rng);
        let n_train = cfg.train_count(group.len());
        if cfg.stratify && cfg.test > 0 && (n_train == 0 || n_train == group.len()) {
            return Err(Error::Split(format!(
                "class {} has {} unit(s); cannot place it on both sides of a {}:{} split",
                table.classes()[class],
                group.len(),
                cfg.train,
                cfg.test
            )));
        }
        train.extend_from_slice(&group[..n_train]);
        test.extend_from_slice(&group[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| units[i].clone()).collect::<Vec<_>>();
    Ok((table.gather(&pick(&train)), table.gather(&pick(&test))))
}

/// Keeps at most `cap` rows per class, choosing whole units at random and
/// trimming the last one.
pub fn subsample(table: &DatasetTable, cap: usize, unit_len: usize, seed: u64) -> DatasetTable {
    let units = units(table, unit_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for mut group in groups(table, &units, true) {
        group.shuffle(&mut rng);
        let mut budget = cap;
        for i in group {
            if budget == 0 {
                break;
            }
            let u = &units[i];
            let take = u.len().min(budget);
            keep.push(u.start..u.start + take);
            budget -= take;
        }
    }
    keep.sort_unstable_by_key(|r| r.start);
    table.gather(&keep)
}
