//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use teapcr::data::{TemporalSynth, WindowedBatch};
use teapcr::tensor::{grad_check, GradCheckConfig, GradCheckReport, Graph, Mode, Tensor, Var};
use teapcr::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// Row-major `[m×k]·[k×n]` by the textbook triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Same-size cross-correlation of one `[cin,h,w]` image by explicit
/// sliding-window sums with bounds checks in place of padding.
pub fn naive_conv(img: &[f64], kernel: &[f64], bias: &[f64], cin: usize, cout: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = (k as isize - 1) / 2;
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for ky in 0..k as isize {
                        for kx in 0..k as isize {
                            let (sy, sx) = (y + ky - p, x + kx - p);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let kv = kernel[((co * cin + ci) * k + ky as usize) * k + kx as usize];
                            acc += kv * img[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(co * h + y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

/// Accuracy, macro precision, macro recall and their harmonic mean,
/// recounted directly from label pairs without a confusion matrix.
pub fn brute_metrics(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64, f64, f64) {
    let n = truth.len() as f64;
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
    let (mut ps, mut rs) = (0.0, 0.0);
    for c in 0..k {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        ps += prec;
        rs += rec;
    }
    let (p, r) = (ps / k as f64, rs / k as f64);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (correct / n, p, r, f1)
}

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (arp, arq) = (a[r * n + p], a[r * n + q]);
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let (apr, aqr) = (a[p * n + r], a[q * n + r]);
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Reduces any output to a scalar through a fixed random weighting, so
/// every output coordinate reaches the gradient.
fn weighted_sum(g: &mut Graph<'_>, x: Var, seed: u64) -> Result<Var> {
    let w = normal(g.shape(x), &mut rng(seed ^ 0x5eed));
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    g.sum(y)
}

type Body = Box<dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>>;

fn case(name: &'static str, inputs: Vec<Tensor>, seed: u64, body: Body) -> (&'static str, Vec<Tensor>, Body) {
    let wrapped: Body = Box::new(move |g, v| {
        let y = body(g, v)?;
        if g.value(y).len() == 1 {
            Ok(y)
        } else {
            weighted_sum(g, y, seed)
        }
    });
    (name, inputs, wrapped)
}

/// Finite-difference checks of every differentiable primitive on random
/// inputs drawn from `seed`. Returns the report per primitive.
pub fn primitive_gradchecks(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = rng(seed);
    let mut n = |shape: &[usize]| normal(shape, &mut r);
    let perm4 = teapcr::eapcr::seeded_permutation(4, seed);
    let ids: Vec<usize> = (0..6).map(|i| (i * 7 + seed as usize) % 5).collect();
    let labels: Vec<usize> = (0..3).map(|i| (i + seed as usize) % 4).collect();
    let cases = vec![
        case("matmul", vec![n(&[3, 4]), n(&[4, 2])], seed, Box::new(|g, v| g.matmul(v[0], v[1]))),
        case("bmm", vec![n(&[2, 3, 4]), n(&[2, 4, 3])], seed, Box::new(|g, v| g.bmm(v[0], v[1], false))),
        case("bmm_trans_b", vec![n(&[2, 3, 4]), n(&[2, 5, 4])], seed, Box::new(|g, v| g.bmm(v[0], v[1], true))),
        case("add_broadcast", vec![n(&[2, 3, 4]), n(&[4])], seed, Box::new(|g, v| g.add(v[0], v[1]))),
        case("mul", vec![n(&[3, 4]), n(&[3, 4])], seed, Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale_by", vec![n(&[3, 4]), n(&[1])], seed, Box::new(|g, v| g.scale_by(v[0], v[1]))),
        case("scale", vec![n(&[3, 4])], seed, Box::new(|g, v| g.scale(v[0], -1.7))),
        case("relu", vec![n(&[4, 5])], seed, Box::new(|g, v| g.relu(v[0]))),
        case("tanh", vec![n(&[4, 5])], seed, Box::new(|g, v| g.tanh(v[0]))),
        case("sigmoid", vec![n(&[4, 5])], seed, Box::new(|g, v| g.sigmoid(v[0]))),
        case("softmax_last", vec![n(&[3, 5])], seed, Box::new(|g, v| g.softmax(v[0], 1))),
        case("softmax_middle", vec![n(&[2, 3, 4])], seed, Box::new(|g, v| g.softmax(v[0], 1))),
        case(
            "layer_norm",
            vec![n(&[3, 6]), n(&[6]), n(&[6])],
            seed,
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        case(
            "conv2d_k5",
            vec![n(&[2, 1, 6, 6]), n(&[4, 1, 5, 5]), n(&[4])],
            seed,
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2)),
        ),
        case(
            "conv2d_k3",
            vec![n(&[1, 4, 5, 5]), n(&[2, 4, 3, 3]), n(&[2])],
            seed,
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1)),
        ),
        case(
            "conv2d_tiny",
            vec![n(&[2, 1, 2, 2]), n(&[3, 1, 5, 5]), n(&[3])],
            seed,
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2)),
        ),
        case(
            "embedding",
            vec![n(&[5, 3])],
            seed,
            Box::new(move |g, v| g.embedding(v[0], &ids, &[2, 3])),
        ),
        case(
            "dropout",
            vec![n(&[4, 5])],
            seed,
            Box::new(move |g, v| {
                let mut mask_rng = rng(seed);
                g.dropout(v[0], 0.5, &mut Mode::Train(&mut mask_rng))
            }),
        ),
        case("reshape", vec![n(&[2, 6])], seed, Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        case("permute", vec![n(&[2, 3, 4])], seed, Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        case(
            "permute_square",
            vec![n(&[2, 4, 4])],
            seed,
            Box::new(move |g, v| g.permute_square(v[0], &perm4)),
        ),
        case("slice_last", vec![n(&[3, 6])], seed, Box::new(|g, v| g.slice_last(v[0], 2, 3))),
        case("select_step", vec![n(&[2, 4, 3])], seed, Box::new(|g, v| g.select_step(v[0], 2))),
        case(
            "stack_steps",
            vec![n(&[2, 3]), n(&[2, 3]), n(&[2, 3])],
            seed,
            Box::new(|g, v| g.stack_steps(&[v[0], v[1], v[2], v[0]])),
        ),
        case("sum", vec![n(&[3, 4])], seed, Box::new(|g, v| g.sum(v[0]))),
        case("mean", vec![n(&[3, 4])], seed, Box::new(|g, v| g.mean(v[0]))),
        case(
            "cross_entropy",
            vec![n(&[3, 4])],
            seed,
            Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, body)| Ok((name, grad_check(body, &inputs, cfg)?)))
        .collect()
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        for k in 0..n {
            a.swap(c * n + k, p * n + k);
        }
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    x
}

/// Squared residual of the least-squares fit of `y` on `[1, t, sin ωt, cos ωt]`.
fn sinusoid_residual(y: &[f64], omega: f64) -> f64 {
    let basis = |t: usize| {
        let t = t as f64;
        [1.0, t, (omega * t).sin(), (omega * t).cos()]
    };
    let mut ata = vec![0.0; 16];
    for i in 0..4 {
        ata[i * 5] = 1e-10;
    }
    let mut aty = vec![0.0; 4];
    for (t, &v) in y.iter().enumerate() {
        let phi = basis(t);
        for i in 0..4 {
            aty[i] += phi[i] * v;
            for j in 0..4 {
                ata[i * 4 + j] += phi[i] * phi[j];
            }
        }
    }
    let beta = solve(ata, aty, 4);
    y.iter()
        .enumerate()
        .map(|(t, &v)| {
            let phi = basis(t);
            let fit: f64 = (0..4).map(|i| phi[i] * beta[i]).sum();
            (v - fit) * (v - fit)
        })
        .sum()
}

/// Matched-filter classifier with the generator's true periods: picks the
/// class whose per-channel sinusoid plus trend fits the window best.
pub fn matched_filter_predict(batch: &WindowedBatch, synth: &TemporalSynth) -> Vec<usize> {
    (0..batch.len())
        .map(|i| {
            let score = |k: usize| -> f64 {
                (0..batch.features)
                    .map(|j| {
                        let y: Vec<f64> = (0..batch.window).map(|t| batch.step(i, t)[j]).collect();
                        sinusoid_residual(&y, TAU / synth.period(k, j))
                    })
                    .sum()
            };
            (0..synth.classes).min_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap()
        })
        .collect()
}

/// Test accuracy of multinomial logistic regression fitted by full-batch
/// gradient descent on single readings (the last step of every window).
pub fn single_step_logistic_accuracy(train: &WindowedBatch, test: &WindowedBatch, classes: usize) -> f64 {
    let f = train.features;
    let rows = |b: &WindowedBatch| -> Vec<Vec<f64>> {
        (0..b.len())
            .map(|i| {
                let mut r = b.last_step(i).to_vec();
                r.push(1.0);
                r
            })
            .collect()
    };
    let (x, xt) = (rows(train), rows(test));
    // standardize on the training side
    let mut mu = vec![0.0; f];
    let mut sd = vec![0.0; f];
    for r in &x {
        for j in 0..f {
            mu[j] += r[j] / x.len() as f64;
        }
    }
    for r in &x {
        for j in 0..f {
            sd[j] += (r[j] - mu[j]).powi(2) / x.len() as f64;
        }
    }
    let z = |r: &[f64]| -> Vec<f64> {
        (0..=f).map(|j| if j < f { (r[j] - mu[j]) / sd[j].sqrt().max(1e-12) } else { 1.0 }).collect()
    };
    let (x, xt): (Vec<_>, Vec<_>) = (x.iter().map(|r| z(r)).collect(), xt.iter().map(|r| z(r)).collect());
    let mut w = vec![0.0; (f + 1) * classes];
    let probs = |w: &[f64], r: &[f64]| -> Vec<f64> {
        let s: Vec<f64> = (0..classes).map(|c| (0..=f).map(|j| r[j] * w[j * classes + c]).sum()).collect();
        let m = s.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        e.into_iter().map(|v| v / tot).collect()
    };
    for _ in 0..500 {
        let mut grad = vec![0.0; w.len()];
        for (r, &y) in x.iter().zip(&train.labels) {
            let p = probs(&w, r);
            for c in 0..classes {
                let g = p[c] - if c == y { 1.0 } else { 0.0 };
                for j in 0..=f {
                    grad[j * classes + c] += g * r[j] / x.len() as f64;
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(grad) {
            *wi -= 0.5 * g;
        }
    }
    let correct = xt
        .iter()
        .zip(&test.labels)
        .filter(|(r, &y)| {
            let p = probs(&w, r);
            (0..classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap() == y
        })
        .count();
    correct as f64 / test.len() as f64
}
