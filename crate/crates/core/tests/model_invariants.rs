mod common;

use common::{jacobi_eigenvalues, naive_matmul, normal, rng};
use proptest::prelude::*;
use teapcr::data::Feature;
use teapcr::eapcr::{bilinear_gram, permute_gram, seeded_permutation};
use teapcr::harness::desk_instance;
use teapcr::model::{Net, Variant};
use teapcr::tapcr::{Encoder, SequenceEncoder, TapcrConfig, TapcrModel};
use teapcr::tensor::{Graph, Mode, ParamStore, Session, Tensor};

fn tapcr_without_positions(window: usize, encoder: Encoder, seed: u64) -> (ParamStore, TapcrModel) {
    let mut store = ParamStore::new();
    let cfg = TapcrConfig {
        d: 8,
        heads: 2,
        layers: 2,
        dropout: 0.0,
        encoder,
        positional: false,
        seed,
        ..TapcrConfig::new(window, 3)
    };
    let features = vec![
        Feature::continuous("a"),
        Feature::continuous("b"),
        Feature::categorical("c", vec!["x".into(), "y".into()]),
    ];
    let model = TapcrModel::new(&mut store, "t", cfg, &features, &mut rng(seed)).unwrap();
    (store, model)
}

fn windows(b: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let noise = normal(&[b * w * 3], &mut r);
    noise
        .data()
        .chunks(3)
        .enumerate()
        .flat_map(|(i, c)| [c[0], c[1], (i % 2) as f64])
        .collect()
}

#[test]
fn bilinear_gram_matches_triple_loop() {
    let (b, f, d) = (3, 5, 4);
    let mut r = rng(1);
    let e = normal(&[b, f, d], &mut r);
    let a = normal(&[d, d], &mut r);
    let mut g = Graph::new();
    let (ve, va) = (g.constant(e.clone()), g.constant(a.clone()));
    let gram = bilinear_gram(&mut g, ve, va).unwrap();
    let got = g.value(gram);
    for n in 0..b {
        let en = &e.data()[n * f * d..(n + 1) * f * d];
        let ea = naive_matmul(en, a.data(), f, d, d);
        for i in 0..f {
            for j in 0..f {
                let want: f64 = (0..d).map(|p| ea[i * d + p] * en[j * d + p]).sum::<f64>() / (d as f64).sqrt();
                assert!((got.at(&[n, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn invalid_permutation_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 3, 3]));
    assert!(matches!(permute_gram(&mut g, x, &[0, 0, 2]), Err(teapcr::Error::Param(_))));
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, model) = tapcr_without_positions(6, Encoder::Transformer, 3);
    let mut s = Session::new(&store);
    let steps = model.encode_steps(&mut s, &windows(4, 6, 9)).unwrap();
    let enc = model.encode(&mut s, steps).unwrap();
    assert_eq!(enc.attention.len(), 2);
    for a in enc.attention {
        assert_eq!(s.graph.shape(a), &[4 * 2, 6, 6]);
        for row in s.graph.value(a).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_lstm_weights_give_zero_hidden_states() {
    let (mut store, model) = tapcr_without_positions(5, Encoder::Lstm, 4);
    let SequenceEncoder::Lstm(lstm) = &model.encoder else { unreachable!() };
    for id in [lstm.input, lstm.recurrent, lstm.bias] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut s = Session::new(&store);
    let steps = model.encode_steps(&mut s, &windows(3, 5, 2)).unwrap();
    let enc = model.encode(&mut s, steps).unwrap();
    assert!(s.graph.value(enc.hidden).data().iter().all(|&h| h == 0.0));
}

#[test]
fn zero_tapcr_weight_reduces_to_eapcr() {
    let (mut model, inputs, _) = desk_instance(Variant::TimeEapcrT, 5).unwrap();
    let alpha = model.store.find("fusion.alpha_tapcr").unwrap();
    model.store.get_mut(alpha).data_mut()[0] = 0.0;
    let fused = model.logits(&inputs).unwrap();
    let Net::Fused(net) = &model.net else { unreachable!() };
    let mut s = Session::new(&model.store);
    let e = net.eapcr.forward(&mut s, &inputs.tokens, &mut Mode::Eval).unwrap();
    assert_eq!(fused.data(), s.graph.value(e).data());
}

#[test]
fn zero_cnn_weights_leave_the_mlp_path() {
    let (mut model, inputs, _) = desk_instance(Variant::Eapcr, 6).unwrap();
    for name in ["eapcr.fusion.w_cnn1", "eapcr.fusion.w_cnn2"] {
        let id = model.store.find(name).unwrap();
        model.store.get_mut(id).data_mut()[0] = 0.0;
    }
    let w_mlp = model.store.find("eapcr.fusion.w_mlp").unwrap();
    model.store.get_mut(w_mlp).data_mut()[0] = 0.5;
    let got = model.logits(&inputs).unwrap();

    // embedding rows, then relu(x·W1 + b1)·W2 + b2, by hand
    let p = |n: &str| model.store.get(model.store.find(n).unwrap()).clone();
    let (table, w1, b1, w2, b2) = (
        p("eapcr.embedding"),
        p("eapcr.mlp.hidden.weight"),
        p("eapcr.mlp.hidden.bias"),
        p("eapcr.mlp.out.weight"),
        p("eapcr.mlp.out.bias"),
    );
    let d = table.shape()[1];
    let (fd, hid, k) = (w1.shape()[0], w1.shape()[1], w2.shape()[1]);
    for (n, toks) in inputs.tokens.chunks(inputs.features).enumerate() {
        let x: Vec<f64> = toks.iter().flat_map(|&t| table.data()[t * d..(t + 1) * d].to_vec()).collect();
        let mut h = naive_matmul(&x, w1.data(), 1, fd, hid);
        for (v, b) in h.iter_mut().zip(b1.data()) {
            *v = (*v + b).max(0.0);
        }
        let o = naive_matmul(&h, w2.data(), 1, hid, k);
        for c in 0..k {
            let want = 0.5 * (o[c] + b2.data()[c]);
            assert!((got.at(&[n, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_forward_is_deterministic_for_every_variant() {
    for v in Variant::ALL {
        let (m1, inputs, _) = desk_instance(v, 8).unwrap();
        let (m2, _, _) = desk_instance(v, 8).unwrap();
        assert_eq!(m1.logits(&inputs).unwrap(), m2.logits(&inputs).unwrap(), "{v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_preserves_the_entry_multiset(n in 1usize..=12, seed in any::<u64>()) {
        let perm = seeded_permutation(n, seed);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let x = normal(&[2, n, n], &mut rng(seed));
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = permute_gram(&mut g, vx, &perm).unwrap();
        for b in 0..2 {
            let mut before: Vec<f64> = x.data()[b * n * n..(b + 1) * n * n].to_vec();
            let mut after: Vec<f64> = g.value(y).data()[b * n * n..(b + 1) * n * n].to_vec();
            before.sort_by(f64::total_cmp);
            after.sort_by(f64::total_cmp);
            prop_assert_eq!(before, after);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(g.value(y).at(&[b, i, j]), x.at(&[b, perm[i], perm[j]]));
                }
            }
        }
    }

    #[test]
    fn identity_bilinear_gram_is_symmetric_psd(f in 1usize..=10, d in 1usize..=16, seed in any::<u64>()) {
        let e = normal(&[1, f, d], &mut rng(seed));
        let mut g = Graph::new();
        let ve = g.constant(e);
        let va = g.constant(Tensor::eye(d));
        let gram = bilinear_gram(&mut g, ve, va).unwrap();
        let m = g.value(gram).data().to_vec();
        for i in 0..f {
            for j in 0..f {
                prop_assert!((m[i * f + j] - m[j * f + i]).abs() < 1e-12);
            }
        }
        for lambda in jacobi_eigenvalues(&m, f) {
            prop_assert!(lambda >= -1e-9, "eigenvalue {}", lambda);
        }
    }

    #[test]
    fn transformer_is_time_equivariant_without_positions(w in 2usize..=6, seed in any::<u64>()) {
        let (store, model) = tapcr_without_positions(w, Encoder::Transformer, seed);
        let b = 2;
        let values = windows(b, w, seed ^ 1);
        let perm = seeded_permutation(w, seed ^ 2);
        let permuted: Vec<f64> = (0..b)
            .flat_map(|n| perm.iter().flat_map(move |&t| (0..3).map(move |j| (n, t, j))))
            .map(|(n, t, j)| values[(n * w + t) * 3 + j])
            .collect();
        let hidden = |v: &[f64]| {
            let mut s = Session::new(&store);
            let steps = model.encode_steps(&mut s, v).unwrap();
            let enc = model.encode(&mut s, steps).unwrap();
            s.graph.value(enc.hidden).clone()
        };
        let (h, hp) = (hidden(&values), hidden(&permuted));
        for n in 0..b {
            for (i, &t) in perm.iter().enumerate() {
                for c in 0..8 {
                    prop_assert!((hp.at(&[n, i, c]) - h.at(&[n, t, c])).abs() < 1e-9);
                }
            }
        }
    }
}
