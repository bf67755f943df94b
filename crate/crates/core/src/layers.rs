//! Parameter groups shared by the EAPCR and TAPCR networks.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{kaiming_uniform, Graph, Mode, ParamId, ParamStore, Session, Tensor, Var};

pub(crate) const CONV1_CHANNELS: usize = 4;
pub(crate) const CONV1_KERNEL: usize = 5;
pub(crate) const CONV2_CHANNELS: usize = 2;
pub(crate) const CONV2_KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add(format!("{prefix}.weight"), kaiming_uniform([fan_in, fan_out], fan_in, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([fan_out])),
        }
    }

    /// `x [N, in] -> [N, out]`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x, w)?;
        s.graph.add(y, b)
    }

    /// Applies the layer to the last axis of `x [.., in]`.
    pub fn forward_nd(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let (last, lead) = shape.split_last().expect("non-scalar input");
        let rows: usize = lead.iter().product();
        let flat = s.graph.reshape(x, &[rows, *last])?;
        let y = self.forward(s, flat)?;
        let out = s.graph.shape(y)[1];
        let mut new_shape = lead.to_vec();
        new_shape.push(out);
        s.graph.reshape(y, &new_shape)
    }
}

/// conv(1→4, k5) → relu → conv(4→2, k3) → relu → flatten → linear to K,
/// applied to `[B, n, n]` maps.
#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub head: Linear,
    pub side: usize,
}

impl CnnBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, side: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let k1 = CONV1_KERNEL;
        let k2 = CONV2_KERNEL;
        let conv1 = (
            store.add(
                format!("{prefix}.conv1.weight"),
                kaiming_uniform([CONV1_CHANNELS, 1, k1, k1], k1 * k1, rng),
            ),
            store.add(format!("{prefix}.conv1.bias"), Tensor::zeros([CONV1_CHANNELS])),
        );
        let conv2 = (
            store.add(
                format!("{prefix}.conv2.weight"),
                kaiming_uniform([CONV2_CHANNELS, CONV1_CHANNELS, k2, k2], CONV1_CHANNELS * k2 * k2, rng),
            ),
            store.add(format!("{prefix}.conv2.bias"), Tensor::zeros([CONV2_CHANNELS])),
        );
        let head = Linear::new(store, &format!("{prefix}.head"), CONV2_CHANNELS * side * side, classes, rng);
        Self { conv1, conv2, head, side }
    }

    pub fn forward(&self, s: &mut Session<'_>, maps: Var) -> Result<Var> {
        let b = s.graph.shape(maps)[0];
        let n = self.side;
        let x = s.graph.reshape(maps, &[b, 1, n, n])?;
        let (w1, b1) = (s.param(self.conv1.0), s.param(self.conv1.1));
        let x = s.graph.conv2d(x, w1, b1, (CONV1_KERNEL - 1) / 2)?;
        let x = s.graph.relu(x)?;
        let (w2, b2) = (s.param(self.conv2.0), s.param(self.conv2.1));
        let x = s.graph.conv2d(x, w2, b2, (CONV2_KERNEL - 1) / 2)?;
        let x = s.graph.relu(x)?;
        let x = s.graph.reshape(x, &[b, CONV2_CHANNELS * n * n])?;
        self.head.forward(s, x)
    }
}

/// linear → relu → dropout → linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), input, hidden, rng),
            out: Linear::new(store, &format!("{prefix}.out"), hidden, classes, rng),
            dropout,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let h = self.hidden.forward(s, x)?;
        let h = s.graph.relu(h)?;
        let h = s.graph.dropout(h, self.dropout, mode)?;
        self.out.forward(s, h)
    }
}

/// Learnable scalar weights over branch logits, each initialized to 1.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub weights: Vec<ParamId>,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, names: &[String]) -> Self {
        Self {
            weights: names.iter().map(|n| store.add(n.clone(), Tensor::scalar(1.0))).collect(),
        }
    }

    /// `Σ_i w_i · branches[i]`.
    pub fn forward(&self, s: &mut Session<'_>, branches: &[Var]) -> Result<Var> {
        debug_assert_eq!(branches.len(), self.weights.len());
        let mut acc: Option<Var> = None;
        for (&w, &x) in self.weights.iter().zip(branches) {
            let wv = s.param(w);
            let term = s.graph.scale_by(x, wv)?;
            acc = Some(match acc {
                None => term,
                Some(a) => s.graph.add(a, term)?,
            });
        }
        Ok(acc.expect("at least one branch"))
    }
}

/// `x·xᵀ / √d` over a batch `[B, n, d]`.
pub fn scaled_gram(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let d = *g.shape(x).last().expect("3-D input");
    let gram = g.bmm(x, x, true)?;
    g.scale(gram, 1.0 / (d as f64).sqrt())
}
