//! Seeded training runs, evaluation, sweeps and ablations.

mod checkpoint;
mod experiments;
mod report;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use experiments::{ablate, desk_instance, gradcheck_variant, sweep_window, AblationRow, AblationTable, SweepRow, SweepTable};
pub use report::{emit_report, write_atomic, DataSummary, EpochRecord, TrainReport};

use crate::data::{make_windows, split, subsample, DatasetTable, Feature, Manifest, Normalizer, WindowedBatch};
use crate::eapcr::FeatureVocab;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{Inputs, Model, ModelConfig, Variant};
use crate::tensor::{Adam, AdamConfig, Mode, Session};

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: Manifest,
    pub variant: Variant,
    /// Overrides the manifest's window size.
    pub window: Option<usize>,
    /// Overrides the manifest's stride.
    pub stride: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub bins: usize,
    pub hidden_per_step: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Overrides the manifest's per-class row cap.
    pub cap_per_class: Option<usize>,
    /// Number of final epochs averaged into the summary.
    pub summary_epochs: usize,
    /// Carve a validation split out of the training side and report
    /// per-epoch metrics on it; the test split is scored once at the end.
    pub validation: bool,
    #[serde(skip)]
    pub report: Option<PathBuf>,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(manifest: Manifest, variant: Variant) -> Self {
        Self {
            manifest,
            variant,
            window: None,
            stride: None,
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            d: 128,
            heads: 4,
            layers: 2,
            bins: 10,
            hidden_per_step: 32,
            dropout: 0.5,
            seed: 0,
            cap_per_class: None,
            summary_epochs: 20,
            validation: false,
            report: None,
            checkpoint: None,
        }
    }

    /// Window length; always 1 for the EAPCR variant.
    pub fn window(&self) -> usize {
        match self.variant {
            Variant::Eapcr => 1,
            _ => self.window.unwrap_or(self.manifest.window),
        }
    }

    pub fn stride(&self) -> usize {
        match self.variant {
            Variant::Eapcr => 1,
            _ => self.stride.or(self.manifest.stride).unwrap_or_else(|| self.window()),
        }
    }

    pub fn cap(&self) -> Option<usize> {
        self.cap_per_class.or(self.manifest.cap_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.window() == 0 || self.stride() == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.summary_epochs == 0 || self.epochs < self.summary_epochs {
            return Err(Error::Config(format!(
                "summary averages the last {} epochs but only {} are configured",
                self.summary_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn model_config(&self, features: Vec<Feature>, classes: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            features,
            classes,
            window: self.window(),
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            bins: self.bins,
            hidden_per_step: self.hidden_per_step,
            dropout: self.dropout,
            seed: self.seed,
        }
    }
}

/// Raw (unnormalized) windows of one run.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub features: Vec<Feature>,
    pub classes: Vec<String>,
    pub train: WindowedBatch,
    /// Validation windows in validation mode, otherwise the test windows.
    pub eval: WindowedBatch,
    pub test: WindowedBatch,
    pub summary: DataSummary,
}

/// The run's dataset table after loading, optional alignment to a
/// reference schema, and the per-class cap.
pub fn load_table(cfg: &RunConfig, reference: Option<(&[Feature], &[String])>) -> Result<DatasetTable> {
    let mut table = cfg.manifest.load_table()?;
    if let Some((features, classes)) = reference {
        table.align_to(features, classes)?;
    }
    Ok(match cfg.cap() {
        Some(cap) => subsample(&table, cap, cfg.manifest.split.unit_len(cfg.window()), cfg.seed),
        None => table,
    })
}

/// Load, cap, split and window the run's dataset.
pub fn split_data(cfg: &RunConfig, reference: Option<(&[Feature], &[String])>) -> Result<SplitData> {
    let table = load_table(cfg, reference)?;
    let (w, stride) = (cfg.window(), cfg.stride());
    let mut split_cfg = cfg.manifest.split;
    split_cfg.seed = cfg.seed;
    let (train_t, test_t) = split(&table, &split_cfg, w)?;
    let (train_t, val_t) = if cfg.validation {
        split_cfg.seed = cfg.seed.wrapping_add(1);
        let (a, b) = split(&train_t, &split_cfg, w)?;
        (a, Some(b))
    } else {
        (train_t, None)
    };
    let (train, train_r) = make_windows(&train_t, w, stride)?;
    let (test, test_r) = make_windows(&test_t, w, stride)?;
    let eval = match &val_t {
        Some(v) => make_windows(v, w, stride)?.0,
        None => test.clone(),
    };
    if train.is_empty() {
        return Err(Error::Data(format!("no training windows of length {w}")));
    }
    if eval.is_empty() || test.is_empty() {
        return Err(Error::Data(format!("no evaluation windows of length {w}; check the split ratio")));
    }
    let summary = DataSummary {
        rows: table.len(),
        train_windows: train.len(),
        eval_windows: eval.len(),
        test_windows: test.len(),
        dropped_rows: train_r.dropped_rows + test_r.dropped_rows,
        skipped_segments: train_r.skipped_segments + test_r.skipped_segments,
        flagged_features: Vec::new(),
        degenerate_bins: Vec::new(),
    };
    Ok(SplitData {
        features: table.features().to_vec(),
        classes: table.classes().to_vec(),
        train,
        eval,
        test,
        summary,
    })
}

/// Scores `model` on `inputs` in inference mode, `batch_size` windows at a
/// time.
pub fn score(model: &Model, inputs: &Inputs, labels: &[usize], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    let idx: Vec<usize> = (0..inputs.len).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let pred = model.predict(&inputs.select(chunk))?;
        let truth: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        cm.update(&truth, &pred)?;
    }
    Ok(cm)
}

/// Output of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    pub normalizer: Normalizer,
    pub classes: Vec<String>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Full seeded run: split, normalize, build the vocabulary, train with
/// Adam and score the evaluation split after every epoch. Writes the
/// report and checkpoint when their paths are set.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mut data = split_data(cfg, None)?;
    let normalizer = Normalizer::fit(&data.train, &data.features);
    for batch in [&mut data.train, &mut data.eval, &mut data.test] {
        normalizer.apply(batch);
    }
    let vocab = FeatureVocab::build(&data.features, &data.train.values, cfg.bins)?;
    data.summary.flagged_features = normalizer.flagged.iter().map(|&j| data.features[j].name.clone()).collect();
    data.summary.degenerate_bins = vocab.degenerate.iter().map(|&j| data.features[j].name.clone()).collect();

    let mut model = Model::new(cfg.model_config(data.features.clone(), data.classes.len()), vocab)?;
    let train_in = model.inputs(&data.train)?;
    let eval_in = model.inputs(&data.eval)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut report = TrainReport {
        variant: cfg.variant,
        config: cfg.clone(),
        data: data.summary.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        summary: Metrics::default(),
        summary_epochs: cfg.summary_epochs,
        final_test: None,
        diverged: None,
        seed: cfg.seed,
        wall_clock_secs: 0.0,
    };

    for epoch in 0..cfg.epochs {
        match run_epoch(cfg, &mut model, &mut adam, &train_in, &data.train.labels, epoch) {
            Ok(loss) => {
                let m = score(&model, &eval_in, &data.eval.labels, cfg.batch_size)?.metrics()?;
                report.epochs.push(EpochRecord::new(epoch, loss, m));
            }
            Err(Error::Numerical(msg)) => {
                let msg = format!("diverged in epoch {epoch}: {msg}");
                report.diverged = Some(msg.clone());
                report.wall_clock_secs = started.elapsed().as_secs_f64();
                if let Some(path) = &cfg.report {
                    emit_report(&report, path)?;
                }
                return Err(Error::Numerical(msg));
            }
            Err(e) => return Err(e),
        }
    }
    report.summary = report.recompute_summary();
    if cfg.validation {
        let test_in = model.inputs(&data.test)?;
        report.final_test = Some(score(&model, &test_in, &data.test.labels, cfg.batch_size)?.metrics()?);
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(path) = &cfg.report {
        emit_report(&report, path)?;
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(
            &Checkpoint {
                run: cfg.clone(),
                model: model.clone(),
                normalizer: normalizer.clone(),
                classes: data.classes.clone(),
            },
            path,
        )?;
    }
    Ok(TrainOutcome {
        report,
        model,
        normalizer,
        classes: data.classes,
    })
}

/// One pass of shuffled minibatch Adam steps; returns the mean loss.
fn run_epoch(cfg: &RunConfig, model: &mut Model, adam: &mut Adam, inputs: &Inputs, labels: &[usize], epoch: usize) -> Result<f64> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..inputs.len).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch = inputs.select(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = {
            let mut s = Session::new(&model.store);
            let logits = model.forward(&mut s, &batch, &mut Mode::Train(&mut rng))?;
            let loss = s.graph.cross_entropy(logits, &y)?;
            let value = s.graph.value(loss).data()[0];
            s.graph.backward(loss)?;
            (value, s.param_grads())
        };
        adam.step(&mut model.store, &grads)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / inputs.len as f64)
}

/// Inference-mode metrics of a checkpoint on the test split of `manifest`
/// (or of the manifest it was trained with).
pub fn evaluate(checkpoint: &Checkpoint, manifest: Option<&Manifest>) -> Result<Metrics> {
    let mut run = checkpoint.run.clone();
    if let Some(m) = manifest {
        run.manifest = m.clone();
    }
    run.validation = false;
    let features = &checkpoint.model.config.features;
    let mut data = split_data(&run, Some((features, &checkpoint.classes)))?;
    checkpoint.normalizer.apply(&mut data.test);
    let inputs = checkpoint.model.inputs(&data.test)?;
    score(&checkpoint.model, &inputs, &data.test.labels, run.batch_size)?.metrics()
}
