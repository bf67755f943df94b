//! Temporal network over windows of time steps, and its fusion with the
//! per-step EAPCR network.
//!
//! Each step is encoded as a linear projection of its continuous features
//! plus embeddings of its categorical codes plus a sinusoidal position.
//! A pre-norm Transformer (or, for the ablation, an LSTM) turns the steps
//! into `H [W, d]`; the temporal Gram matrix `H·Hᵀ/√d` and a fixed
//! permutation of it feed two CNN branches while the flattened `H` feeds an
//! MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Feature, FeatureKind};
use crate::eapcr::{seeded_permutation, EapcrModel};
use crate::error::{Error, Result};
use crate::layers::{scaled_gram, CnnBranch, Fusion, Linear, Mlp};
use crate::tensor::{embedding_normal, kaiming_uniform, Mode, ParamId, ParamStore, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Transformer,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapcrConfig {
    pub window: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    pub hidden_per_step: usize,
    pub dropout: f64,
    pub encoder: Encoder,
    /// Add sinusoidal positions to the step encodings.
    pub positional: bool,
    pub seed: u64,
}

impl TapcrConfig {
    pub fn new(window: usize, classes: usize) -> Self {
        Self {
            window,
            d: 128,
            heads: 4,
            layers: 2,
            classes,
            hidden_per_step: 32,
            dropout: 0.5,
            encoder: Encoder::Transformer,
            positional: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::Config("TAPCR needs W, d and h positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by h = {}", self.d, self.heads)));
        }
        if self.classes < 2 {
            return Err(Error::Config("TAPCR needs K >= 2".into()));
        }
        if self.hidden_per_step == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("MLP width must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `pe[t][2i] = sin(t / 10000^(2i/d))`, `pe[t][2i+1] = cos(..)`.
pub fn sinusoidal_positions(window: usize, d: usize) -> Tensor {
    Tensor::from_fn([window, d], |idx| {
        let (t, c) = ((idx / d) as f64, idx % d);
        let freq = 10000f64.powf(-((c - c % 2) as f64) / d as f64);
        if c % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full([d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([d])),
        }
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gain), s.param(self.bias));
        s.graph.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d),
            query: Linear::new(store, &format!("{prefix}.query"), d, d, rng),
            key: Linear::new(store, &format!("{prefix}.key"), d, d, rng),
            value: Linear::new(store, &format!("{prefix}.value"), d, d, rng),
            output: Linear::new(store, &format!("{prefix}.output"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
            ff1: Linear::new(store, &format!("{prefix}.ff1"), d, 4 * d, rng),
            ff2: Linear::new(store, &format!("{prefix}.ff2"), 4 * d, d, rng),
        }
    }

    /// Returns the block output and the attention probabilities
    /// `[B·h, W, W]`.
    fn forward(&self, s: &mut Session<'_>, x: Var, heads: usize) -> Result<(Var, Var)> {
        let [b, w, d] = s.graph.shape(x)[..] else {
            return Err(Error::Shape("transformer input must be [B, W, d]".into()));
        };
        let dh = d / heads;
        let n = self.norm1.forward(s, x)?;
        let split = |lin: &Linear, s: &mut Session<'_>| -> Result<Var> {
            let y = lin.forward_nd(s, n)?;
            let y = s.graph.reshape(y, &[b, w, heads, dh])?;
            let y = s.graph.permute(y, &[0, 2, 1, 3])?;
            s.graph.reshape(y, &[b * heads, w, dh])
        };
        let q = split(&self.query, s)?;
        let k = split(&self.key, s)?;
        let v = split(&self.value, s)?;
        let scores = s.graph.bmm(q, k, true)?;
        let scores = s.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = s.graph.softmax(scores, 2)?;
        let ctx = s.graph.bmm(attn, v, false)?;
        let ctx = s.graph.reshape(ctx, &[b, heads, w, dh])?;
        let ctx = s.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.graph.reshape(ctx, &[b, w, d])?;
        let out = self.output.forward_nd(s, ctx)?;
        let x = s.graph.add(x, out)?;
        let n = self.norm2.forward(s, x)?;
        let f = self.ff1.forward_nd(s, n)?;
        let f = s.graph.relu(f)?;
        let f = self.ff2.forward_nd(s, f)?;
        Ok((s.graph.add(x, f)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

impl Lstm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        // bound 1/√d
        Self {
            input: store.add(format!("{prefix}.input"), kaiming_uniform([d, 4 * d], 6 * d, rng)),
            recurrent: store.add(format!("{prefix}.recurrent"), kaiming_uniform([d, 4 * d], 6 * d, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([4 * d])),
        }
    }

    /// Single-layer recurrence from a zero state; gates ordered i, f, g, o.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let [b, w, d] = s.graph.shape(x)[..] else {
            return Err(Error::Shape("LSTM input must be [B, W, d]".into()));
        };
        let (wx, wh, bias) = (s.param(self.input), s.param(self.recurrent), s.param(self.bias));
        let mut h = s.graph.constant(Tensor::zeros([b, d]));
        let mut c = s.graph.constant(Tensor::zeros([b, d]));
        let mut hs = Vec::with_capacity(w);
        for t in 0..w {
            let xt = s.graph.select_step(x, t)?;
            let zx = s.graph.matmul(xt, wx)?;
            let zh = s.graph.matmul(h, wh)?;
            let z = s.graph.add(zx, zh)?;
            let z = s.graph.add(z, bias)?;
            let gi = s.graph.slice_last(z, 0, d)?;
            let gf = s.graph.slice_last(z, d, d)?;
            let gg = s.graph.slice_last(z, 2 * d, d)?;
            let go = s.graph.slice_last(z, 3 * d, d)?;
            let i = s.graph.sigmoid(gi)?;
            let f = s.graph.sigmoid(gf)?;
            let g = s.graph.tanh(gg)?;
            let o = s.graph.sigmoid(go)?;
            let keep = s.graph.mul(f, c)?;
            let write = s.graph.mul(i, g)?;
            c = s.graph.add(keep, write)?;
            let tc = s.graph.tanh(c)?;
            h = s.graph.mul(o, tc)?;
            hs.push(h);
        }
        s.graph.stack_steps(&hs)
    }
}

#[derive(Clone, Debug)]
pub enum SequenceEncoder {
    Transformer { blocks: Vec<TransformerBlock>, norm: LayerNorm },
    Lstm(Lstm),
}

/// Output of the sequence encoder.
pub struct Encoded {
    /// `[B, W, d]`.
    pub hidden: Var,
    /// Attention probabilities `[B·h, W, W]` per layer (empty for the LSTM).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TapcrModel {
    pub config: TapcrConfig,
    /// Level count for categorical inputs, `None` for continuous ones.
    pub kinds: Vec<Option<usize>>,
    pub projection: Option<Linear>,
    pub categorical: Vec<ParamId>,
    pub positions: Tensor,
    pub encoder: SequenceEncoder,
    pub permutation: Vec<usize>,
    pub cnn1: CnnBranch,
    pub cnn2: CnnBranch,
    pub mlp: Mlp,
    pub fusion: Fusion,
}

impl TapcrModel {
    pub fn new(store: &mut ParamStore, prefix: &str, config: TapcrConfig, features: &[Feature], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if features.is_empty() {
            return Err(Error::Config("TAPCR needs at least one feature".into()));
        }
        let (w, d, k) = (config.window, config.d, config.classes);
        let kinds: Vec<Option<usize>> = features
            .iter()
            .map(|f| (f.kind == FeatureKind::Categorical).then_some(f.levels.len()))
            .collect();
        let continuous = kinds.iter().filter(|k| k.is_none()).count();
        let projection = (continuous > 0).then(|| Linear::new(store, &format!("{prefix}.projection"), continuous, d, rng));
        let categorical = features
            .iter()
            .filter(|f| f.is_categorical())
            .map(|f| {
                store.add(
                    format!("{prefix}.category.{}", f.name),
                    embedding_normal(f.levels.len() + 1, d, rng),
                )
            })
            .collect();
        let encoder = match config.encoder {
            Encoder::Transformer => SequenceEncoder::Transformer {
                blocks: (0..config.layers)
                    .map(|l| TransformerBlock::new(store, &format!("{prefix}.encoder.block{l}"), d, rng))
                    .collect(),
                norm: LayerNorm::new(store, &format!("{prefix}.encoder.norm"), d),
            },
            Encoder::Lstm => SequenceEncoder::Lstm(Lstm::new(store, &format!("{prefix}.encoder.lstm"), d, rng)),
        };
        let cnn1 = CnnBranch::new(store, &format!("{prefix}.cnn1"), w, k, rng);
        let cnn2 = CnnBranch::new(store, &format!("{prefix}.cnn2"), w, k, rng);
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), w * d, w * config.hidden_per_step, k, config.dropout, rng);
        let fusion = Fusion::new(
            store,
            &["w_cnn1", "w_cnn2", "w_mlp"].map(|n| format!("{prefix}.fusion.{n}")),
        );
        let positions = if config.positional {
            sinusoidal_positions(w, d)
        } else {
            Tensor::zeros([w, d])
        };
        Ok(Self {
            permutation: seeded_permutation(w, config.seed),
            config,
            kinds,
            projection,
            categorical,
            positions,
            encoder,
            cnn1,
            cnn2,
            mlp,
            fusion,
        })
    }

    fn batch_size(&self, values: &[f64]) -> Result<usize> {
        let per = self.config.window * self.kinds.len();
        if values.is_empty() || values.len() % per != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form windows of {} x {}",
                values.len(),
                self.config.window,
                self.kinds.len()
            )));
        }
        Ok(values.len() / per)
    }

    /// Windows `[B, W, F]` (row-major) to step encodings `[B, W, d]`.
    pub fn encode_steps(&self, s: &mut Session<'_>, values: &[f64]) -> Result<Var> {
        let b = self.batch_size(values)?;
        let (w, d, f) = (self.config.window, self.config.d, self.kinds.len());
        let rows = b * w;
        let mut acc: Option<Var> = None;
        let mut push = |s: &mut Session<'_>, v: Var| -> Result<()> {
            acc = Some(match acc {
                None => v,
                Some(a) => s.graph.add(a, v)?,
            });
            Ok(())
        };
        if let Some(proj) = &self.projection {
            let cont: Vec<f64> = values
                .chunks(f)
                .flat_map(|row| row.iter().zip(&self.kinds).filter(|(_, k)| k.is_none()).map(|(v, _)| *v))
                .collect();
            let fc = cont.len() / rows;
            let x = s.graph.constant(Tensor::new([rows, fc], cont)?);
            let y = proj.forward(s, x)?;
            let y = s.graph.reshape(y, &[b, w, d])?;
            push(s, y)?;
        }
        let mut table = self.categorical.iter();
        for (j, kind) in self.kinds.iter().enumerate() {
            let Some(levels) = *kind else { continue };
            let ids: Vec<usize> = values
                .chunks(f)
                .map(|row| {
                    let x = row[j];
                    if x >= 0.0 && x.fract() == 0.0 && (x as usize) < levels {
                        x as usize
                    } else {
                        levels
                    }
                })
                .collect();
            let t = s.param(*table.next().expect("one table per categorical feature"));
            let y = s.graph.embedding(t, &ids, &[b, w])?;
            push(s, y)?;
        }
        let steps = acc.expect("at least one feature");
        if self.config.positional {
            let pos = s.graph.constant(self.positions.clone());
            s.graph.add(steps, pos)
        } else {
            Ok(steps)
        }
    }

    pub fn encode(&self, s: &mut Session<'_>, steps: Var) -> Result<Encoded> {
        match &self.encoder {
            SequenceEncoder::Transformer { blocks, norm } => {
                let mut x = steps;
                let mut attention = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let (y, a) = block.forward(s, x, self.config.heads)?;
                    x = y;
                    attention.push(a);
                }
                Ok(Encoded {
                    hidden: norm.forward(s, x)?,
                    attention,
                })
            }
            SequenceEncoder::Lstm(lstm) => Ok(Encoded {
                hidden: lstm.forward(s, steps)?,
                attention: Vec::new(),
            }),
        }
    }

    /// Branch logits of the temporal Gram matrix and its permutation.
    pub fn temporal_gram_path(&self, s: &mut Session<'_>, hidden: Var) -> Result<(Var, Var)> {
        let g = scaled_gram(&mut s.graph, hidden)?;
        let gp = s.graph.permute_square(g, &self.permutation)?;
        Ok((self.cnn1.forward(s, g)?, self.cnn2.forward(s, gp)?))
    }

    pub fn forward(&self, s: &mut Session<'_>, values: &[f64], mode: &mut Mode<'_>) -> Result<Var> {
        let b = self.batch_size(values)?;
        let steps = self.encode_steps(s, values)?;
        let enc = self.encode(s, steps)?;
        let (l1, l2) = self.temporal_gram_path(s, enc.hidden)?;
        let flat = s.graph.reshape(enc.hidden, &[b, self.config.window * self.config.d])?;
        let l3 = self.mlp.forward(s, flat, mode)?;
        self.fusion.forward(s, &[l1, l2, l3])
    }
}

/// EAPCR on each window's final step plus TAPCR on the whole window.
#[derive(Clone, Debug)]
pub struct TimeEapcrTModel {
    pub eapcr: EapcrModel,
    pub tapcr: TapcrModel,
    /// `alpha_eapcr`, `alpha_tapcr`.
    pub fusion: Fusion,
}

impl TimeEapcrTModel {
    pub fn new(store: &mut ParamStore, prefix: &str, eapcr: EapcrModel, tapcr: TapcrModel) -> Result<Self> {
        if eapcr.config.classes != tapcr.config.classes {
            return Err(Error::Config(format!(
                "EAPCR has {} classes, TAPCR {}",
                eapcr.config.classes, tapcr.config.classes
            )));
        }
        if eapcr.config.features != tapcr.kinds.len() {
            return Err(Error::Config(format!(
                "EAPCR has {} features, TAPCR {}",
                eapcr.config.features,
                tapcr.kinds.len()
            )));
        }
        let fusion = Fusion::new(store, &["alpha_eapcr", "alpha_tapcr"].map(|n| format!("{prefix}.{n}")));
        Ok(Self { eapcr, tapcr, fusion })
    }

    /// `values` are `[B, W, F]` windows, `tokens` the `[B, F]` tokens of
    /// each window's final step.
    pub fn forward(&self, s: &mut Session<'_>, values: &[f64], tokens: &[usize], mode: &mut Mode<'_>) -> Result<Var> {
        let e = self.eapcr.forward(s, tokens, mode)?;
        let t = self.tapcr.forward(s, values, mode)?;
        if s.graph.shape(e) != s.graph.shape(t) {
            return Err(Error::Shape(format!(
                "token batch {:?} and window batch {:?} disagree",
                s.graph.shape(e),
                s.graph.shape(t)
            )));
        }
        self.fusion.forward(s, &[e, t])
    }
}
