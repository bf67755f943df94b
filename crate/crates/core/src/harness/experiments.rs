use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{load_table, train, RunConfig};
use crate::data::{Feature, WindowedBatch};
use crate::eapcr::FeatureVocab;
use crate::error::{Error, Result};
use crate::model::{Inputs, Model, ModelConfig, Variant};
use crate::tensor::{grad_check_params, GradCheckConfig, GradCheckReport, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub window: usize,
    pub feasible: bool,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub variant: Variant,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window,feasible,f1,accuracy\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            s += &format!("{},{},{},{}\n", r.window, r.feasible, opt(r.f1), opt(r.accuracy));
        }
        s
    }
}

/// Trains once per window size with otherwise identical settings. Sizes
/// longer than the shortest (record, class) segment are marked infeasible.
pub fn sweep_window(cfg: &RunConfig, sizes: &[usize]) -> Result<SweepTable> {
    if sizes.is_empty() {
        return Err(Error::Config("window sweep needs at least one size".into()));
    }
    let mut probe = cfg.clone();
    probe.cap_per_class = None;
    probe.manifest.cap_per_class = None;
    let shortest = load_table(&probe, None)?
        .segments()
        .iter()
        .map(|s| s.len())
        .min()
        .unwrap_or(0);
    let mut rows = Vec::with_capacity(sizes.len());
    for &w in sizes {
        if w == 0 || w > shortest {
            rows.push(SweepRow {
                window: w,
                feasible: false,
                f1: None,
                accuracy: None,
                note: Some(format!("window exceeds the shortest segment ({shortest} rows)")),
            });
            continue;
        }
        let mut run = cfg.clone();
        run.window = Some(w);
        run.report = None;
        run.checkpoint = None;
        let summary = train(&run)?.report.summary;
        rows.push(SweepRow {
            window: w,
            feasible: true,
            f1: Some(summary.f1),
            accuracy: Some(summary.accuracy),
            note: None,
        });
    }
    Ok(SweepTable {
        variant: cfg.variant,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub f1: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,f1,accuracy,recall,precision\n");
        for r in &self.rows {
            s += &format!("{},{},{},{},{}\n", r.variant, r.f1, r.accuracy, r.recall, r.precision);
        }
        s
    }

    pub fn get(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.label())
    }
}

/// Trains all four variants with the same seed and budget.
pub fn ablate(cfg: &RunConfig) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let mut run = cfg.clone();
        run.variant = v;
        run.report = None;
        run.checkpoint = None;
        let s = train(&run)?.report.summary;
        rows.push(AblationRow {
            variant: v.label().to_string(),
            f1: s.f1,
            accuracy: s.accuracy,
            recall: s.recall,
            precision: s.precision,
        });
    }
    Ok(AblationTable { rows })
}

/// A small random instance of `variant`: two samples, W = 4 (1 for EAPCR),
/// two continuous features and one three-level categorical, d = 8, h = 2,
/// one layer, three classes, dropout off.
pub fn desk_instance(variant: Variant, seed: u64) -> Result<(Model, Inputs, Vec<usize>)> {
    let features = vec![
        Feature::continuous("a"),
        Feature::continuous("b"),
        Feature::categorical("c", vec!["low".into(), "medium".into(), "high".into()]),
    ];
    let window = if variant == Variant::Eapcr { 1 } else { 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.random_range(0..3) as f64]
    };
    let vocab_rows: Vec<f64> = (0..32).flat_map(|_| row(&mut rng)).collect();
    let vocab = FeatureVocab::build(&features, &vocab_rows, 4)?;
    let batch = WindowedBatch {
        window,
        features: 3,
        values: (0..2 * window).flat_map(|_| row(&mut rng)).collect(),
        labels: vec![rng.random_range(0..3), rng.random_range(0..3)],
        provenance: vec![0..window, window..2 * window],
    };
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        layers: 1,
        bins: 4,
        hidden_per_step: 4,
        dropout: 0.0,
        seed,
        ..ModelConfig::new(variant, features, 3, window)
    };
    let model = Model::new(cfg, vocab)?;
    let inputs = model.inputs(&batch)?;
    Ok((model, inputs, batch.labels))
}

/// Finite-difference check of the cross-entropy gradient with respect to
/// every parameter of a [`desk_instance`].
pub fn gradcheck_variant(variant: Variant, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (model, inputs, labels) = desk_instance(variant, seed)?;
    grad_check_params(
        &model.store,
        |s| {
            let logits = model.forward(s, &inputs, &mut Mode::Eval)?;
            s.graph.cross_entropy(logits, &labels)
        },
        cfg,
    )
}
