//! Time-EAPCR-T anomaly detection for multi-source sensor data.
//!
//! The crate bundles everything needed to train and evaluate the model
//! family from scratch:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode tape, Adam and a
//!   finite-difference gradient checker.
//! - [`eapcr`]: the per-sample network (embedding, bilinear Gram matrix,
//!   fixed permutation, twin CNN branches and a residual MLP).
//! - [`tapcr`]: the temporal network with a Transformer (or LSTM) sequence
//!   encoder and the fused Time-EAPCR-T model.
//! - [`data`]: CSV ingestion, manifests, splitting, windowing,
//!   normalization and synthetic generators.
//! - [`metrics`]: confusion matrix and macro metrics.
//! - [`harness`]: training loop, evaluation, window sweep, ablation,
//!   checkpoints and reports.

pub mod data;
pub mod eapcr;
pub mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tapcr;
pub mod tensor;

pub use error::{Error, Result};
