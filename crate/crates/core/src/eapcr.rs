//! Per-step feature-interaction network: token embedding, bilinear Gram
//! matrix, fixed permutation, two CNN branches and an MLP branch fused by
//! learnable weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Feature, FeatureKind};
use crate::error::{Error, Result};
use crate::layers::{CnnBranch, Fusion, Mlp};
use crate::tensor::{embedding_normal, is_permutation, Graph, Mode, ParamId, ParamStore, Session, Tensor, Var};

/// Token layout for one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureTokens {
    /// Interior bin edges, strictly increasing; `edges.len() + 1` bins.
    Continuous { offset: usize, edges: Vec<f64> },
    /// Observed category codes in token order.
    Categorical { offset: usize, codes: Vec<usize> },
}

impl FeatureTokens {
    fn count(&self) -> usize {
        match self {
            FeatureTokens::Continuous { edges, .. } => edges.len() + 1,
            FeatureTokens::Categorical { codes, .. } => codes.len(),
        }
    }
}

/// Discretization of every feature into embedding token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocab {
    pub features: Vec<FeatureTokens>,
    /// Shared token for category codes unseen during `build_vocab`.
    pub unknown: Option<usize>,
    pub size: usize,
    /// Continuous features whose training values produced a single bin.
    pub degenerate: Vec<usize>,
}

impl FeatureVocab {
    /// Equal-frequency bins for continuous features and one token per
    /// observed code for categorical ones, from row-major `rows`.
    pub fn build(features: &[Feature], rows: &[f64], bins: usize) -> Result<Self> {
        let f = features.len();
        if bins < 2 {
            return Err(Error::Param(format!("need at least 2 bins, got {bins}")));
        }
        if f == 0 || rows.is_empty() || rows.len() % f != 0 {
            return Err(Error::Shape(format!("{} values do not form rows of {f} features", rows.len())));
        }
        let n = rows.len() / f;
        let mut out = Vec::with_capacity(f);
        let mut degenerate = Vec::new();
        let mut offset = 0;
        for (j, feat) in features.iter().enumerate() {
            let column = rows.iter().skip(j).step_by(f).copied();
            let tokens = match feat.kind {
                FeatureKind::Continuous => {
                    let mut v: Vec<f64> = column.collect();
                    v.sort_by(f64::total_cmp);
                    let mut edges: Vec<f64> = (1..bins).map(|q| v[q * n / bins]).collect();
                    edges.dedup();
                    edges.retain(|&e| e > v[0]);
                    if edges.is_empty() {
                        degenerate.push(j);
                    }
                    FeatureTokens::Continuous { offset, edges }
                }
                FeatureKind::Categorical => {
                    let mut codes: Vec<usize> = column.map(|x| x as usize).collect();
                    codes.sort_unstable();
                    codes.dedup();
                    FeatureTokens::Categorical { offset, codes }
                }
            };
            offset += tokens.count();
            out.push(tokens);
        }
        let unknown = features.iter().any(Feature::is_categorical).then(|| {
            offset += 1;
            offset - 1
        });
        Ok(Self {
            features: out,
            unknown,
            size: offset,
            degenerate,
        })
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    /// Bin index of `x` for continuous feature `j`: values on an edge go to
    /// the higher bin, values outside the edges clamp to the end bins.
    pub fn bin(&self, j: usize, x: f64) -> Option<usize> {
        match &self.features[j] {
            FeatureTokens::Continuous { edges, .. } => Some(edges.partition_point(|&e| e <= x)),
            FeatureTokens::Categorical { .. } => None,
        }
    }

    pub fn token(&self, j: usize, x: f64) -> usize {
        match &self.features[j] {
            FeatureTokens::Continuous { offset, edges } => offset + edges.partition_point(|&e| e <= x),
            FeatureTokens::Categorical { offset, codes } => {
                let code = x as usize;
                match codes.binary_search(&code) {
                    Ok(i) if x >= 0.0 && x.fract() == 0.0 => offset + i,
                    _ => self.unknown.expect("categorical vocab has an unknown token"),
                }
            }
        }
    }

    /// Token ids for one sample of `F` values.
    pub fn tokenize(&self, sample: &[f64]) -> Result<Vec<usize>> {
        if sample.len() != self.features.len() {
            return Err(Error::Shape(format!(
                "sample has {} values, vocab expects {}",
                sample.len(),
                self.features.len()
            )));
        }
        Ok(sample.iter().enumerate().map(|(j, &x)| self.token(j, x)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EapcrConfig {
    pub features: usize,
    pub d: usize,
    pub bins: usize,
    pub classes: usize,
    /// MLP hidden width per feature.
    pub hidden_per_step: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EapcrConfig {
    pub fn new(features: usize, classes: usize) -> Self {
        Self {
            features,
            d: 128,
            bins: 10,
            classes,
            hidden_per_step: 32,
            dropout: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.d == 0 {
            return Err(Error::Config("EAPCR needs F >= 1 and d >= 1".into()));
        }
        if self.classes < 2 || self.bins < 2 {
            return Err(Error::Config("EAPCR needs K >= 2 and B >= 2".into()));
        }
        if self.hidden_per_step == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("MLP width must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Fixed uniformly random permutation of `0..n` drawn from `seed`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

#[derive(Clone, Debug)]
pub struct EapcrModel {
    pub config: EapcrConfig,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub bilinear: ParamId,
    pub permutation: Vec<usize>,
    pub cnn1: CnnBranch,
    pub cnn2: CnnBranch,
    pub mlp: Mlp,
    pub fusion: Fusion,
}

impl EapcrModel {
    /// Registers parameters under `prefix` in `store`.
    pub fn new(store: &mut ParamStore, prefix: &str, config: EapcrConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let (f, d, k) = (config.features, config.d, config.classes);
        let embedding = store.add(format!("{prefix}.embedding"), embedding_normal(vocab_size, d, rng));
        let bilinear = store.add(format!("{prefix}.bilinear"), Tensor::eye(d));
        let cnn1 = CnnBranch::new(store, &format!("{prefix}.cnn1"), f, k, rng);
        let cnn2 = CnnBranch::new(store, &format!("{prefix}.cnn2"), f, k, rng);
        let mlp = Mlp::new(store, &format!("{prefix}.mlp"), f * d, f * config.hidden_per_step, k, config.dropout, rng);
        let fusion = Fusion::new(
            store,
            &["w_cnn1", "w_cnn2", "w_mlp"].map(|w| format!("{prefix}.fusion.{w}")),
        );
        Ok(Self {
            permutation: seeded_permutation(f, config.seed),
            config,
            vocab_size,
            embedding,
            bilinear,
            cnn1,
            cnn2,
            mlp,
            fusion,
        })
    }

    /// `[B, F]` token rows to embeddings `[B, F, d]`.
    pub fn embed(&self, s: &mut Session<'_>, tokens: &[usize]) -> Result<Var> {
        let f = self.config.features;
        if tokens.is_empty() || tokens.len() % f != 0 {
            return Err(Error::Shape(format!("{} tokens do not form rows of {f}", tokens.len())));
        }
        let table = s.param(self.embedding);
        s.graph.embedding(table, tokens, &[tokens.len() / f, f])
    }

    pub fn gram(&self, s: &mut Session<'_>, e: Var) -> Result<Var> {
        let a = s.param(self.bilinear);
        bilinear_gram(&mut s.graph, e, a)
    }

    pub fn forward(&self, s: &mut Session<'_>, tokens: &[usize], mode: &mut Mode<'_>) -> Result<Var> {
        let e = self.embed(s, tokens)?;
        let b = s.graph.shape(e)[0];
        let g = self.gram(s, e)?;
        let gp = permute_gram(&mut s.graph, g, &self.permutation)?;
        let l1 = self.cnn1.forward(s, g)?;
        let l2 = self.cnn2.forward(s, gp)?;
        let flat = s.graph.reshape(e, &[b, self.config.features * self.config.d])?;
        let l3 = self.mlp.forward(s, flat, mode)?;
        self.fusion.forward(s, &[l1, l2, l3])
    }
}

/// `E·A·Eᵀ / √d` for `E [B, F, d]` and `A [d, d]`.
pub fn bilinear_gram(g: &mut Graph<'_>, e: Var, a: Var) -> Result<Var> {
    let shape = g.shape(e).to_vec();
    let [b, f, d] = shape[..] else {
        return Err(Error::Shape(format!("embeddings must be [B, F, d], got {shape:?}")));
    };
    if g.shape(a) != [d, d] {
        return Err(Error::Shape(format!("bilinear matrix must be [{d}, {d}], got {:?}", g.shape(a))));
    }
    let flat = g.reshape(e, &[b * f, d])?;
    let ea = g.matmul(flat, a)?;
    let ea = g.reshape(ea, &[b, f, d])?;
    let gram = g.bmm(ea, e, true)?;
    g.scale(gram, 1.0 / (d as f64).sqrt())
}

/// `G'[i][j] = G[π(i)][π(j)]` for each map of a `[B, F, F]` batch.
pub fn permute_gram(g: &mut Graph<'_>, gram: Var, perm: &[usize]) -> Result<Var> {
    if !is_permutation(perm) {
        return Err(Error::Param(format!("{perm:?} is not a permutation")));
    }
    g.permute_square(gram, perm)
}
