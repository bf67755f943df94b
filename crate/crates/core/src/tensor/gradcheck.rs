//! Central-difference verification of reverse-mode gradients.
//!
//! For every checked coordinate the function is evaluated at `x ± eps`.
//! The relative error is `|analytic - numeric| / max(|analytic|, |numeric|,
//! floor)`. A coordinate whose forward and backward one-sided slopes
//! disagree by more than `kink_tol` (relative) sits on a non-differentiable
//! point such as a ReLU at zero; it is reported in `excluded` and does not
//! count toward the maximum.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::Tensor;
use super::graph::{Graph, Var};
use super::params::{ParamStore, Session};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub floor: f64,
    pub kink_tol: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            kink_tol: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub input: usize,
    pub index: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    pub checked: usize,
    pub excluded: Vec<Coord>,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.excluded.extend(other.excluded);
    }
}

/// Checks `f` built from leaves holding `inputs`. Returns the worst
/// relative error over all coordinates away from kinks.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let y = scalar(&g, out)?;
        if !grads {
            return Ok((y, Vec::new()));
        }
        g.backward(out)?;
        let gs = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((y, gs))
    };
    let mut values = inputs.to_vec();
    let (f0, analytic) = run(&values, true)?;
    let shapes: Vec<usize> = values.iter().map(Tensor::len).collect();
    drive(&shapes, &analytic, f0, cfg, |input, index, delta| {
        let orig = values[input].data()[index];
        values[input].data_mut()[index] = orig + delta;
        let r = run(&values, false).map(|(y, _)| y);
        values[input].data_mut()[index] = orig;
        r
    })
}

/// Checks the gradient of `f` with respect to every tensor in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Session<'a>) -> Result<Var>,
{
    let (f0, analytic) = {
        let mut s = Session::new(store);
        let out = f(&mut s)?;
        let y = scalar(&s.graph, out)?;
        s.graph.backward(out)?;
        (y, s.param_grads())
    };
    let mut work = store.clone();
    let shapes: Vec<usize> = analytic.iter().map(Tensor::len).collect();
    drive(&shapes, &analytic, f0, cfg, |input, index, delta| {
        let slot = &mut work.values_mut()[input];
        let orig = slot.data()[index];
        slot.data_mut()[index] = orig + delta;
        let r = {
            let mut s = Session::new(&work);
            f(&mut s).and_then(|out| scalar(&s.graph, out))
        };
        work.values_mut()[input].data_mut()[index] = orig;
        r
    })
}

fn scalar(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Usage(format!("gradient check needs a scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

fn drive(
    sizes: &[usize],
    analytic: &[Tensor],
    f0: f64,
    cfg: &GradCheckConfig,
    mut eval_at: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for (input, &n) in sizes.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut part = GradCheckReport::default();
        for index in coords {
            let plus = eval_at(input, index, cfg.eps)?;
            let minus = eval_at(input, index, -cfg.eps)?;
            let fwd = (plus - f0) / cfg.eps;
            let bwd = (f0 - minus) / cfg.eps;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[input].data()[index];
            let scale = a.abs().max(numeric.abs()).max(cfg.floor);
            let coord = Coord { input, index };
            if (fwd - bwd).abs() > cfg.kink_tol * scale {
                part.excluded.push(coord);
                continue;
            }
            part.checked += 1;
            let rel = (a - numeric).abs() / scale;
            if rel > part.max_rel_error {
                part.max_rel_error = rel;
                part.worst = Some(coord);
            }
        }
        report.merge(part);
    }
    Ok(report)
}
