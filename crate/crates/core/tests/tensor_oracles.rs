mod common;

use common::{naive_conv, naive_matmul, normal, primitive_gradchecks, rng};
use proptest::prelude::*;
use rand::Rng;
use teapcr::tensor::{GradCheckConfig, Graph, Tensor};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matmul_5x7_by_7x3_matches_triple_loop() {
    let mut r = rng(11);
    let (a, b) = (normal(&[5, 7], &mut r), normal(&[7, 3], &mut r));
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(va, vb).unwrap();
    assert!(max_diff(g.value(y).data(), &naive_matmul(a.data(), b.data(), 5, 7, 3)) < 1e-12);
}

#[test]
fn conv_6x6_k3_matches_sliding_window() {
    let mut r = rng(12);
    let (x, k, b) = (normal(&[1, 1, 6, 6], &mut r), normal(&[1, 1, 3, 3], &mut r), normal(&[1], &mut r));
    let mut g = Graph::new();
    let (vx, vk, vb) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(vx, vk, vb, 1).unwrap();
    let want = naive_conv(x.data(), k.data(), b.data(), 1, 1, 6, 6, 3);
    assert!(max_diff(g.value(y).data(), &want) < 1e-12);
}

#[test]
fn delta_kernel_sums_input_channels() {
    let mut r = rng(13);
    let x = normal(&[2, 3, 4, 4], &mut r);
    let mut kernel = Tensor::zeros([1, 3, 3, 3]);
    for c in 0..3 {
        kernel.set(&[0, c, 1, 1], 1.0);
    }
    let mut g = Graph::new();
    let (vx, vk, vb) = (g.constant(x.clone()), g.constant(kernel), g.constant(Tensor::zeros([1])));
    let y = g.conv2d(vx, vk, vb, 1).unwrap();
    for n in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|c| x.at(&[n, c, i, j])).sum();
                assert!((g.value(y).at(&[n, 0, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_known_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([3], vec![0.0, 0.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    let x = g.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!(g.value(y).all_finite());
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn every_primitive_passes_gradcheck_over_ten_seeds() {
    let cfg = GradCheckConfig::default();
    for seed in 0..10 {
        for (name, rep) in primitive_gradchecks(seed, &cfg).unwrap() {
            assert!(rep.max_rel_error < 1e-4, "{name} seed {seed}: {}", rep.max_rel_error);
            assert!(rep.checked > 0, "{name} checked nothing");
        }
    }
}

#[test]
fn fan_out_gradient_is_n_times_single_use() {
    let mut r = rng(14);
    let x = normal(&[3, 4], &mut r);
    let w = normal(&[3, 4], &mut r);
    let grad_for = |uses: usize| {
        let mut g = Graph::new();
        let vx = g.leaf(x.clone());
        let vw = g.constant(w.clone());
        let mut acc = g.mul(vx, vw).unwrap();
        for _ in 1..uses {
            let t = g.mul(vx, vw).unwrap();
            acc = g.add(acc, t).unwrap();
        }
        let s = g.sum(acc).unwrap();
        g.backward(s).unwrap();
        g.grad(vx).unwrap().clone()
    };
    let one = grad_for(1);
    for n in 2..5 {
        let many = grad_for(n);
        for (a, b) in many.data().iter().zip(one.data()) {
            assert!((a - n as f64 * b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (normal(&[m, k], &mut r), normal(&[k, n], &mut r));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        prop_assert!(max_diff(g.value(y).data(), &naive_matmul(a.data(), b.data(), m, k, n)) < 1e-12);
    }

    #[test]
    fn bmm_agrees_with_per_batch_oracle(b in 1usize..=4, m in 1usize..=6, k in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (x, y, yt) = (normal(&[b, m, k], &mut r), normal(&[b, k, n], &mut r), normal(&[b, n, k], &mut r));
        let mut g = Graph::new();
        let (vx, vy, vyt) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(yt.clone()));
        let plain = g.bmm(vx, vy, false).unwrap();
        let trans = g.bmm(vx, vyt, true).unwrap();
        for i in 0..b {
            let xs = &x.data()[i * m * k..(i + 1) * m * k];
            let want = naive_matmul(xs, &y.data()[i * k * n..(i + 1) * k * n], m, k, n);
            prop_assert!(max_diff(&g.value(plain).data()[i * m * n..(i + 1) * m * n], &want) < 1e-12);
            let ytb = &yt.data()[i * n * k..(i + 1) * n * k];
            let yt_t: Vec<f64> = (0..k * n).map(|q| ytb[(q % n) * k + q / n]).collect();
            let want = naive_matmul(xs, &yt_t, m, k, n);
            prop_assert!(max_diff(&g.value(trans).data()[i * m * n..(i + 1) * m * n], &want) < 1e-12);
        }
    }

    #[test]
    fn conv_agrees_with_oracle(
        batch in 1usize..=2,
        cin in 1usize..=3,
        cout in 1usize..=3,
        h in 1usize..=8,
        w in 1usize..=8,
        half in 0usize..=2,
        seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let mut r = rng(seed);
        let x = normal(&[batch, cin, h, w], &mut r);
        let kern = normal(&[cout, cin, k, k], &mut r);
        let bias = normal(&[cout], &mut r);
        let mut g = Graph::new();
        let (vx, vk, vb) = (g.constant(x.clone()), g.constant(kern.clone()), g.constant(bias.clone()));
        let y = g.conv2d(vx, vk, vb, half).unwrap();
        prop_assert_eq!(g.shape(y), &[batch, cout, h, w]);
        let per_in = cin * h * w;
        let per_out = cout * h * w;
        for i in 0..batch {
            let want = naive_conv(&x.data()[i * per_in..(i + 1) * per_in], kern.data(), bias.data(), cin, cout, h, w, k);
            prop_assert!(max_diff(&g.value(y).data()[i * per_out..(i + 1) * per_out], &want) < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..=8, cols in 1usize..=8, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::from_fn([rows, cols], |_| scale * r.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = g.softmax(vx, 1).unwrap();
        for (row, src) in g.value(y).data().chunks(cols).zip(x.data().chunks(cols)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = src.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in row.iter().zip(src) {
                prop_assert!(*p > 0.0 && *p <= 1.0);
                prop_assert!((p - (v - max).exp() / z).abs() < 1e-12);
            }
        }
    }
}
