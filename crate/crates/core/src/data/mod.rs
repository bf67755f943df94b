//! Sensor tables, manifests, splitting, windowing and normalization.

mod manifest;
mod normalize;
mod split;
mod synth;
mod table;
mod window;

pub use manifest::{Manifest, Source};
pub use normalize::{Normalizer, MIN_STD};
pub use split::{split, subsample, units, SplitConfig, SplitUnit};
pub use synth::{synth_tabular, synth_temporal, TabularSynth, TemporalSynth, SPEED_LEVELS};
pub use table::{load_csv, read_csv, DatasetTable, Feature, FeatureKind, Schema};
pub use window::{make_windows, WindowReport, WindowedBatch};
