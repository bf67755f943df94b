//! `teapcr`: train, evaluate, sweep and ablate Time-EAPCR-T models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use teapcr::data::{synth_tabular, synth_temporal, Manifest, Source, TabularSynth, TemporalSynth};
use teapcr::harness::{
    ablate, evaluate, gradcheck_variant, load_checkpoint, sweep_window, train, write_atomic, RunConfig,
};
use teapcr::model::Variant;
use teapcr::tensor::GradCheckConfig;
use teapcr::{Error, Result};

#[derive(Parser)]
#[command(name = "teapcr", version, about = "Time-EAPCR-T anomaly detection on sensor data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its report and checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// JSON report path; the per-epoch CSV is written next to it.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to score; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train once per window size.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128, 256, 512, 1024])]
        sizes: Vec<usize>,
        /// JSON table path; a CSV is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all four variants with a shared seed and budget.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of each variant on small random
    /// instances.
    Gradcheck {
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Coordinates sampled per parameter tensor (0 checks all).
        #[arg(long, default_value_t = 16)]
        max_coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Write a synthetic dataset as CSV plus a manifest describing it.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        features: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Rows (tabular) or rows per recording (temporal).
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        records_per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        base_period: Option<f64>,
        #[arg(long, default_value_t = 1)]
        window: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Temporal,
    Tabular,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "time-eapcr-t")]
    variant: String,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 32)]
    hidden_per_step: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cap_per_class: Option<usize>,
    #[arg(long, default_value_t = 20)]
    summary_epochs: usize,
    /// Report per-epoch metrics on a validation split carved from training.
    #[arg(long)]
    validation: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let manifest = Manifest::load(&self.manifest)?;
        Ok(RunConfig {
            window: self.window,
            stride: self.stride,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            bins: self.bins,
            hidden_per_step: self.hidden_per_step,
            dropout: self.dropout,
            seed: self.seed,
            cap_per_class: self.cap_per_class,
            summary_epochs: self.summary_epochs,
            validation: self.validation,
            ..RunConfig::new(manifest, self.variant.parse()?)
        })
    }
}

fn write_table(out: Option<&Path>, json: String, csv: String) -> Result<()> {
    if let Some(path) = out {
        write_atomic(path, json.as_bytes())?;
        write_atomic(&path.with_extension("csv"), csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, report, checkpoint } => {
            let mut cfg = run.config()?;
            cfg.report = report;
            cfg.checkpoint = checkpoint;
            let out = train(&cfg)?;
            let s = out.report.summary;
            println!(
                "{} summary over last {} epochs: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
                cfg.variant.label(),
                cfg.summary_epochs,
                s.accuracy,
                s.precision,
                s.recall,
                s.f1
            );
        }
        Command::Eval { checkpoint, manifest, report } => {
            let ck = load_checkpoint(&checkpoint)?;
            let manifest = manifest.map(Manifest::load).transpose()?;
            let m = evaluate(&ck, manifest.as_ref())?;
            let json = serde_json::to_string_pretty(&m)? + "\n";
            if let Some(path) = report {
                write_atomic(&path, json.as_bytes())?;
            }
            print!("{json}");
        }
        Command::Sweep { run, sizes, out } => {
            let table = sweep_window(&run.config()?, &sizes)?;
            write_table(out.as_deref(), serde_json::to_string_pretty(&table)? + "\n", table.to_csv())?;
        }
        Command::Ablate { run, out } => {
            let table = ablate(&run.config()?)?;
            write_table(out.as_deref(), serde_json::to_string_pretty(&table)? + "\n", table.to_csv())?;
        }
        Command::Gradcheck {
            variant,
            seeds,
            max_coords,
            tolerance,
        } => {
            let variants = if variant == "all" {
                Variant::ALL.to_vec()
            } else {
                vec![variant.parse()?]
            };
            let mut worst = 0.0f64;
            for v in variants {
                let mut max = 0.0f64;
                for seed in 0..seeds {
                    let cfg = GradCheckConfig {
                        max_coords: (max_coords > 0).then_some(max_coords),
                        seed,
                        ..GradCheckConfig::default()
                    };
                    max = max.max(gradcheck_variant(v, seed, &cfg)?.max_rel_error);
                }
                println!("{:<13} max relative error {max:.3e} over {seeds} seeds", v.label());
                worst = worst.max(max);
            }
            if worst >= tolerance {
                return Err(Error::Numerical(format!("gradient error {worst:.3e} exceeds {tolerance:.1e}")));
            }
        }
        Command::Synth {
            kind,
            out,
            manifest,
            seed,
            features,
            classes,
            rows,
            records_per_class,
            noise,
            base_period,
            window,
        } => {
            let (table, name) = match kind {
                SynthKind::Temporal => {
                    let d = TemporalSynth::default();
                    let cfg = TemporalSynth {
                        seed,
                        features: features.unwrap_or(d.features),
                        classes: classes.unwrap_or(d.classes),
                        records_per_class: records_per_class.unwrap_or(d.records_per_class),
                        record_len: rows.unwrap_or(d.record_len),
                        noise: noise.unwrap_or(d.noise),
                        base_period: base_period.unwrap_or(d.base_period),
                        ..d
                    };
                    (synth_temporal(&cfg)?, "synth-temporal")
                }
                SynthKind::Tabular => {
                    let d = TabularSynth::default();
                    let cfg = TabularSynth {
                        seed,
                        features: features.unwrap_or(d.features),
                        classes: classes.unwrap_or(d.classes),
                        rows: rows.unwrap_or(d.rows),
                        noise: noise.unwrap_or(d.noise),
                    };
                    (synth_tabular(&cfg)?, "synth-tabular")
                }
            };
            let mut bytes = Vec::new();
            table.write_csv(&mut bytes)?;
            write_atomic(&out, &bytes)?;
            let csv_path = relative_to(&out, manifest.parent());
            let mut m = Manifest::new(
                name,
                Source::Csv {
                    path: csv_path,
                    schema: table.csv_schema(),
                },
            );
            m.window = window;
            write_atomic(&manifest, m.to_text().as_bytes())?;
            println!("wrote {} rows to {}", table.len(), out.display());
        }
    }
    Ok(())
}

/// `path` relative to `dir` when it lies inside it, else absolute.
fn relative_to(path: &Path, dir: Option<&Path>) -> PathBuf {
    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let target = abs(path);
    match dir.map(|d| abs(if d.as_os_str().is_empty() { Path::new(".") } else { d })) {
        Some(d) => target.strip_prefix(&d).map(Path::to_path_buf).unwrap_or(target),
        None => target,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
