//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in append order. Each node keeps its
//! forward value together with whatever the backward rule needs, and
//! [`Graph::backward`] walks the tape once in reverse, accumulating
//! gradients additively into every input that requires them.
//!
//! Leaves can borrow their value (model parameters) so that building a
//! graph does not copy the parameter store.

use std::borrow::Cow;

use rand::Rng;

use super::array::{strides, Tensor};
use super::gemm::gemm;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-pass mode. Dropout masks are drawn from the borrowed generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn rand::RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, kernel: Var, bias: Var, pad: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    PermuteSquare { x: Var, perm: Vec<usize> },
    SliceLast { x: Var, start: usize },
    SelectStep { x: Var, step: usize },
    StackSteps { xs: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::ScaleBy { .. } => "scale_by",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::PermuteSquare { .. } => "permute_square",
            Op::SliceLast { .. } => "slice_last",
            Op::SelectStep { .. } => "select_step",
            Op::StackSteps { .. } => "stack_steps",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Operation name recorded for `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Operation names in tape order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op.name())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    /// Differentiable leaf owning its value.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), true)
    }

    /// Differentiable leaf borrowing its value.
    pub fn leaf_ref(&mut self, t: &'p Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(t), true)
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// Batched product of `[B,m,k]` with `[B,k,n]`, or with `[B,n,k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (if trans_b { sa[2] != sb[2] } else { sa[2] != sb[1] });
        if bad {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push(Tensor::new([batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// `a + b`, where `b`'s shape equals the trailing dimensions of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("add {sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len()) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("scale_by expects one value, got {:?}", self.shape(s))));
        }
        let c = self.value(s).data()[0];
        let out = self.map(x, |v| v * c);
        self.push(out, Op::ScaleBy { x, s }, &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_fn(t.shape().to_vec(), |i| f(t.data()[i]))
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} on {shape:?}")));
        }
        let mut out = self.value(x).clone();
        for_each_lane(&shape, axis, |idx| {
            let d = out.data_mut();
            let max = idx.clone().map(|i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in idx.clone() {
                d[i] = (d[i] - max).exp();
                sum += d[i];
            }
            for i in idx {
                d[i] /= sum;
            }
        });
        self.push(out, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm over {shape:?} with gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mu) * r * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::LayerNorm { x, gain, bias, mean, rstd }, &[x, gain, bias])
    }

    /// Same-size 2-D cross-correlation: `x [B,Cin,H,W]`, `kernel
    /// [Cout,Cin,k,k]`, `bias [Cout]`, zero padding `(k-1)/2`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] {
            return Err(Error::Shape(format!("conv2d input {sx:?}, kernel {sk:?}")));
        }
        let k = sk[2];
        if sk[3] != k || k % 2 == 0 || pad != (k - 1) / 2 {
            return Err(Error::Unsupported(format!(
                "conv2d kernel {}x{} with padding {pad}; need an odd square kernel and padding (k-1)/2",
                sk[2], sk[3]
            )));
        }
        if self.shape(bias) != [sk[0]] {
            return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(bias))));
        }
        let geom = ConvGeom {
            cin: sx[1],
            cout: sk[0],
            h: sx[2],
            w: sx[3],
            k,
            pad,
        };
        let (batch, hw) = (sx[0], geom.h * geom.w);
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; batch * geom.cout * hw];
        let mut cols = vec![0.0; geom.rows() * hw];
        for n in 0..batch {
            geom.im2col(&xv[n * geom.cin * hw..(n + 1) * geom.cin * hw], &mut cols);
            let o = &mut out[n * geom.cout * hw..(n + 1) * geom.cout * hw];
            for (co, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bv[co]);
            }
            gemm(geom.cout, geom.rows(), hw, kv, false, &cols, false, o, true);
        }
        let out = Tensor::new([batch, geom.cout, geom.h, geom.w], out)?;
        self.push(out, Op::Conv2d { x, kernel, bias, pad }, &[x, kernel, bias])
    }

    /// Gathers rows of `table [V×d]`; output shape is `id_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::Shape(format!("embedding table {st:?}")));
        }
        if id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!("{} ids for shape {id_shape:?}", ids.len())));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Inverted dropout; the identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        let rng = match mode {
            Mode::Train(rng) if p > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] * mask[i]);
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("permute {shape:?} by {axes:?}")));
        }
        let out = permute_data(self.value(x), axes);
        self.push(out, Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// Simultaneous row/column permutation of the trailing square matrices:
    /// `out[.., i, j] = x[.., perm[i], perm[j]]`.
    pub fn permute_square(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] || shape[r - 1] != perm.len() {
            return Err(Error::Shape(format!("permute_square {shape:?} by {} indices", perm.len())));
        }
        if !is_permutation(perm) {
            return Err(Error::Param(format!("{perm:?} is not a permutation")));
        }
        let n = perm.len();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(n * n).zip(out.chunks_mut(n * n)) {
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = src[perm[i] * n + perm[j]];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::PermuteSquare { x, perm: perm.to_vec() }, &[x])
    }

    /// `x[.., start..start+len]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if len == 0 || start + len > d {
            return Err(Error::Shape(format!("slice {start}..{} of last axis {d}", start + len)));
        }
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::SliceLast { x, start }, &[x])
    }

    /// `x[:, step, :]` of a `[B,T,D]` tensor.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || step >= s[1] {
            return Err(Error::Shape(format!("select step {step} of {s:?}")));
        }
        let (t, d) = (s[1], s[2]);
        let data = self
            .value(x)
            .data()
            .chunks(t * d)
            .flat_map(|b| b[step * d..(step + 1) * d].iter().copied())
            .collect();
        let out = Tensor::new([s[0], d], data)?;
        self.push(out, Op::SelectStep { x, step }, &[x])
    }

    /// Stacks `T` tensors of shape `[B,D]` into `[B,T,D]`.
    pub fn stack_steps(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .nodes
            .get(xs.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?.0)
            .unwrap()
            .value
            .shape()
            .to_vec();
        if first.len() != 2 || xs.iter().any(|&v| self.shape(v) != first.as_slice()) {
            return Err(Error::Shape("stack_steps needs equal [B,D] inputs".into()));
        }
        let (b, d, t) = (first[0], first[1], xs.len());
        let mut out = vec![0.0; b * t * d];
        for (step, &v) in xs.iter().enumerate() {
            for (n, row) in self.value(v).data().chunks(d).enumerate() {
                out[(n * t + step) * d..(n * t + step + 1) * d].copy_from_slice(row);
            }
        }
        let out = Tensor::new([b, t, d], out)?;
        self.push(out, Op::StackSteps { xs: xs.to_vec() }, xs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!("cross_entropy logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out and can be read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter()
        .all(|&p| p < perm.len() && !std::mem::replace(&mut seen[p], true))
}

/// Calls `f` once per 1-D lane along `axis`, with the flat indices of that lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

fn permute_data(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let r = out_shape.len();
    let mut idx = vec![0usize; r];
    let mut out = Vec::with_capacity(t.len());
    let data = t.data();
    for _ in 0..t.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves size")
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Valid output columns `x0..x1` for kernel column `kx`; the source
    /// column is `x + kx - pad`.
    fn span(&self, kx: usize) -> (usize, usize) {
        let x0 = self.pad.saturating_sub(kx).min(self.w);
        let x1 = (self.w + self.pad).saturating_sub(kx).min(self.w);
        (x0, x1.max(x0))
    }

    /// Unrolls one `[Cin,H,W]` image into `[Cin·k·k, H·W]` patch columns.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (h, w, k, p) = (self.h, self.w, self.k, self.pad);
        let hw = h * w;
        for c in 0..self.cin {
            let plane = &img[c * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let (x0, x1) = self.span(kx);
                    for y in 0..h {
                        let out = &mut row[y * w..][..w];
                        let sy = y + ky;
                        if sy < p || sy - p >= h {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[(sy - p) * w..][..w];
                        out[..x0].fill(0.0);
                        out[x1..].fill(0.0);
                        if x0 == x1 {
                            continue;
                        }
                        out[x0..x1].copy_from_slice(&src[x0 + kx - p..x1 + kx - p]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters column gradients back.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (h, w, k, p) = (self.h, self.w, self.k, self.pad);
        let hw = h * w;
        for c in 0..self.cin {
            let plane = &mut img[c * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let (x0, x1) = self.span(kx);
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h || x0 == x1 {
                            continue;
                        }
                        let dst = &mut plane[(sy - p) * w..][..w];
                        for (d, g) in dst[x0 + kx - p..x1 + kx - p].iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()))
            .data_mut(),
    )
}

fn backprop(nodes: &[Node<'_>], grads: &mut [Option<Tensor>], node: &Node<'_>, g: &Tensor) {
    let gd = g.data();
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                gemm(m, n, k, gd, false, val(*b).data(), true, ga, true);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                gemm(k, m, n, val(*a).data(), true, gd, false, gb, true);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let sa = val(*a).shape();
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let n = g.shape()[2];
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for i in 0..batch {
                    // ga = g·bᵀ (or g·b when b was used transposed)
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..][..m * n],
                        false,
                        &bv[i * k * n..][..k * n],
                        !trans_b,
                        &mut ga[i * m * k..][..m * k],
                        true,
                    );
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for i in 0..batch {
                    let (ai, gi, bi) = (&av[i * m * k..][..m * k], &gd[i * m * n..][..m * n], &mut gb[i * k * n..][..k * n]);
                    if *trans_b {
                        // b is [n×k]: gb = gᵀ·a
                        gemm(n, m, k, gi, true, ai, false, bi, true);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, bi, true);
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (x, y) in ga.iter_mut().zip(gd) {
                    *x += y;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let n = gb.len();
                for chunk in gd.chunks(n) {
                    for (x, y) in gb.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((x, gi), bi) in ga.iter_mut().zip(gd).zip(bv) {
                    *x += gi * bi;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for ((x, gi), ai) in gb.iter_mut().zip(gd).zip(av) {
                    *x += gi * ai;
                }
            }
        }
        Op::ScaleBy { x, s } => {
            let c = val(*s).data()[0];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (o, gi) in gx.iter_mut().zip(gd) {
                    *o += c * gi;
                }
            }
            let dot: f64 = val(*x).data().iter().zip(gd).map(|(a, b)| a * b).sum();
            if let Some(gs) = grad_buf(nodes, grads, *s) {
                gs[0] += dot;
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (o, gi) in gx.iter_mut().zip(gd) {
                    *o += c * gi;
                }
            }
        }
        Op::Relu { x } => {
            let xv = val(*x).data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((o, gi), xi) in gx.iter_mut().zip(gd).zip(xv) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
        }
        Op::Tanh { x } => {
            let y = node.value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((o, gi), yi) in gx.iter_mut().zip(gd).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
        }
        Op::Sigmoid { x } => {
            let y = node.value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((o, gi), yi) in gx.iter_mut().zip(gd).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let shape = node.value.shape().to_vec();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for_each_lane(&shape, *axis, |idx| {
                    let dot: f64 = idx.clone().map(|i| gd[i] * y[i]).sum();
                    for i in idx {
                        gx[i] += y[i] * (gd[i] - dot);
                    }
                });
            }
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let xv = val(*x).data();
            let gv = val(*gain).data();
            let d = gv.len();
            let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for r in 0..mean.len() {
                    let grow = &gd[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let gh = grow[j] * gv[j];
                        m1 += gh;
                        m2 += gh * xhat(r, j);
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (grow[j] * gv[j] - m1 - xhat(r, j) * m2);
                    }
                }
            }
            if let Some(gg) = grad_buf(nodes, grads, *gain) {
                for r in 0..mean.len() {
                    for j in 0..d {
                        gg[j] += gd[r * d + j] * xhat(r, j);
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                for row in gd.chunks(d) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Op::Conv2d { x, kernel, bias, pad } => {
            let sx = val(*x).shape();
            let sk = val(*kernel).shape();
            let geom = ConvGeom {
                cin: sx[1],
                cout: sk[0],
                h: sx[2],
                w: sx[3],
                k: sk[2],
                pad: *pad,
            };
            let (batch, hw) = (sx[0], geom.h * geom.w);
            let xv = val(*x).data();
            let kv = val(*kernel).data();
            if let Some(gbias) = grad_buf(nodes, grads, *bias) {
                for n in 0..batch {
                    for co in 0..geom.cout {
                        gbias[co] += gd[(n * geom.cout + co) * hw..][..hw].iter().sum::<f64>();
                    }
                }
            }
            let mut cols = vec![0.0; geom.rows() * hw];
            if let Some(gk) = grad_buf(nodes, grads, *kernel) {
                for n in 0..batch {
                    geom.im2col(&xv[n * geom.cin * hw..][..geom.cin * hw], &mut cols);
                    let gn = &gd[n * geom.cout * hw..][..geom.cout * hw];
                    gemm(geom.cout, hw, geom.rows(), gn, false, &cols, true, gk, true);
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for n in 0..batch {
                    let gn = &gd[n * geom.cout * hw..][..geom.cout * hw];
                    gemm(geom.rows(), geom.cout, hw, kv, true, gn, false, &mut cols, false);
                    geom.col2im(&cols, &mut gx[n * geom.cin * hw..][..geom.cin * hw]);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).shape()[1];
            if let Some(gt) = grad_buf(nodes, grads, *table) {
                for (row, &id) in gd.chunks(d).zip(ids) {
                    for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((o, gi), m) in gx.iter_mut().zip(gd).zip(mask) {
                    *o += gi * m;
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (o, gi) in gx.iter_mut().zip(gd) {
                    *o += gi;
                }
            }
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let back = permute_data(g, &inverse);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (o, gi) in gx.iter_mut().zip(back.data()) {
                    *o += gi;
                }
            }
        }
        Op::PermuteSquare { x, perm } => {
            let n = perm.len();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (src, dst) in gd.chunks(n * n).zip(gx.chunks_mut(n * n)) {
                    for i in 0..n {
                        for j in 0..n {
                            dst[perm[i] * n + perm[j]] += src[i * n + j];
                        }
                    }
                }
            }
        }
        Op::SliceLast { x, start } => {
            let d = *val(*x).shape().last().unwrap();
            let len = *g.shape().last().unwrap();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (dst, src) in gx.chunks_mut(d).zip(gd.chunks(len)) {
                    for (o, v) in dst[*start..*start + len].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
        Op::SelectStep { x, step } => {
            let s = val(*x).shape();
            let (t, d) = (s[1], s[2]);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (dst, src) in gx.chunks_mut(t * d).zip(gd.chunks(d)) {
                    for (o, v) in dst[step * d..(step + 1) * d].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
        Op::StackSteps { xs } => {
            let s = g.shape();
            let (t, d) = (s[1], s[2]);
            for (step, &v) in xs.iter().enumerate() {
                if let Some(gx) = grad_buf(nodes, grads, v) {
                    for (n, dst) in gx.chunks_mut(d).enumerate() {
                        for (o, val) in dst.iter_mut().zip(&gd[(n * t + step) * d..][..d]) {
                            *o += val;
                        }
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in gx.iter_mut() {
                    *o += gd[0];
                }
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let c = gd[0] / gx.len() as f64;
                for o in gx.iter_mut() {
                    *o += c;
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let k = val(*logits).shape()[1];
            let c = gd[0] / labels.len() as f64;
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                for (n, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gl[n * k + j] += c * (probs[n * k + j] - onehot);
                    }
                }
            }
        }
    }
}
