//! The four model variants behind one interface.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Feature, WindowedBatch};
use crate::eapcr::{EapcrConfig, EapcrModel, FeatureVocab};
use crate::error::{Error, Result};
use crate::tapcr::{Encoder, TapcrConfig, TapcrModel, TimeEapcrTModel};
use crate::tensor::{Mode, ParamStore, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Eapcr,
    Tapcr,
    TimeEapcr,
    TimeEapcrT,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Eapcr, Variant::Tapcr, Variant::TimeEapcr, Variant::TimeEapcrT];

    /// Display name as used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Eapcr => "EAPCR",
            Variant::Tapcr => "TAPCR",
            Variant::TimeEapcr => "Time-EAPCR",
            Variant::TimeEapcrT => "Time-EAPCR-T",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Eapcr => "eapcr",
            Variant::Tapcr => "tapcr",
            Variant::TimeEapcr => "time-eapcr",
            Variant::TimeEapcrT => "time-eapcr-t",
        }
    }

    fn uses_eapcr(self) -> bool {
        self != Variant::Tapcr
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key().eq_ignore_ascii_case(s) || v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected eapcr, tapcr, time-eapcr or time-eapcr-t")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub features: Vec<Feature>,
    pub classes: usize,
    pub window: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub bins: usize,
    pub hidden_per_step: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, features: Vec<Feature>, classes: usize, window: usize) -> Self {
        Self {
            variant,
            features,
            classes,
            window,
            d: 128,
            heads: 4,
            layers: 2,
            bins: 10,
            hidden_per_step: 32,
            dropout: 0.5,
            seed: 0,
        }
    }

    pub fn eapcr(&self) -> EapcrConfig {
        EapcrConfig {
            features: self.features.len(),
            d: self.d,
            bins: self.bins,
            classes: self.classes,
            hidden_per_step: self.hidden_per_step,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn tapcr(&self, encoder: Encoder) -> TapcrConfig {
        TapcrConfig {
            window: self.window,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            classes: self.classes,
            hidden_per_step: self.hidden_per_step,
            dropout: self.dropout,
            encoder,
            positional: true,
            seed: self.seed.wrapping_add(1),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Net {
    Eapcr(EapcrModel),
    Tapcr(TapcrModel),
    Fused(TimeEapcrTModel),
}

/// Model inputs for a batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub len: usize,
    /// Values per window (`W·F`).
    pub window_len: usize,
    pub features: usize,
    /// Normalized windows `[B, W, F]`.
    pub values: Vec<f64>,
    /// Tokens of each window's final step `[B, F]`; empty for TAPCR.
    pub tokens: Vec<usize>,
}

impl Inputs {
    /// Windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Inputs {
        let mut values = Vec::with_capacity(indices.len() * self.window_len);
        let mut tokens = Vec::new();
        for &i in indices {
            values.extend_from_slice(&self.values[i * self.window_len..(i + 1) * self.window_len]);
            if !self.tokens.is_empty() {
                tokens.extend_from_slice(&self.tokens[i * self.features..(i + 1) * self.features]);
            }
        }
        Inputs {
            len: indices.len(),
            window_len: self.window_len,
            features: self.features,
            values,
            tokens,
        }
    }
}

/// A network together with its parameters and token vocabulary.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: FeatureVocab,
    pub store: ParamStore,
    pub net: Net,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: FeatureVocab) -> Result<Self> {
        if vocab.num_features() != config.features.len() {
            return Err(Error::Config(format!(
                "vocab covers {} features, config has {}",
                vocab.num_features(),
                config.features.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = match config.variant {
            Variant::Eapcr => Net::Eapcr(EapcrModel::new(&mut store, "eapcr", config.eapcr(), vocab.size, &mut rng)?),
            Variant::Tapcr => Net::Tapcr(TapcrModel::new(
                &mut store,
                "tapcr",
                config.tapcr(Encoder::Transformer),
                &config.features,
                &mut rng,
            )?),
            Variant::TimeEapcr | Variant::TimeEapcrT => {
                let encoder = if config.variant == Variant::TimeEapcr {
                    Encoder::Lstm
                } else {
                    Encoder::Transformer
                };
                let e = EapcrModel::new(&mut store, "eapcr", config.eapcr(), vocab.size, &mut rng)?;
                let t = TapcrModel::new(&mut store, "tapcr", config.tapcr(encoder), &config.features, &mut rng)?;
                Net::Fused(TimeEapcrTModel::new(&mut store, "fusion", e, t)?)
            }
        };
        Ok(Self {
            config,
            vocab,
            store,
            net,
        })
    }

    /// Tokenizes the final step of every window.
    pub fn inputs(&self, batch: &WindowedBatch) -> Result<Inputs> {
        if batch.window != self.config.window || batch.features != self.config.features.len() {
            return Err(Error::Shape(format!(
                "batch windows are {} x {}, model expects {} x {}",
                batch.window,
                batch.features,
                self.config.window,
                self.config.features.len()
            )));
        }
        let mut tokens = Vec::new();
        if self.config.variant.uses_eapcr() {
            tokens.reserve(batch.len() * batch.features);
            for i in 0..batch.len() {
                tokens.extend(self.vocab.tokenize(batch.last_step(i))?);
            }
        }
        Ok(Inputs {
            len: batch.len(),
            window_len: batch.window * batch.features,
            features: batch.features,
            values: batch.values.clone(),
            tokens,
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, inputs: &Inputs, mode: &mut Mode<'_>) -> Result<Var> {
        match &self.net {
            Net::Eapcr(m) => m.forward(s, &inputs.tokens, mode),
            Net::Tapcr(m) => m.forward(s, &inputs.values, mode),
            Net::Fused(m) => m.forward(s, &inputs.values, &inputs.tokens, mode),
        }
    }

    /// Inference-mode logits `[B, K]`.
    pub fn logits(&self, inputs: &Inputs) -> Result<Tensor> {
        let mut s = Session::new(&self.store);
        let out = self.forward(&mut s, inputs, &mut Mode::Eval)?;
        Ok(s.graph.value(out).clone())
    }

    pub fn predict(&self, inputs: &Inputs) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(inputs)?))
    }
}

/// Index of the largest entry in each row of a `[B, K]` tensor; ties go to
/// the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert!("lstm".parse::<Variant>().is_err());
    }

    #[test]
    fn argmax_prefers_first_of_ties() {
        let t = Tensor::new([2, 3], vec![1.0, 3.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
