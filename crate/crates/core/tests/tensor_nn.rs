use luna_core::autograd::{AttentionMask, Graph, Var};
use luna_core::gradcheck::{check_scalar, collect_grads, GradCheckOptions};
use luna_core::nn::{
    AttentionConfig, Builder, FeedForward, LayerNorm, MultiHeadAttention, LAYER_NORM_EPS,
};
use luna_core::optim::{adam_step, AdamConfig, AdamState, GroupRates, WarmupLinearSchedule};
use luna_core::params::{ParamGroup, ParamStore};
use luna_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn naive_layer_norm(x: &[f64], cols: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let sd = (var + LAYER_NORM_EPS).sqrt();
        for (c, v) in row.iter().enumerate() {
            out.push((v - mean) / sd * gain[c] + bias[c]);
        }
    }
    out
}

#[test]
fn matmul_hand_examples() {
    let mut g = Graph::new();
    let i = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let b = g.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0])).unwrap();
    let p = g.matmul(i, b).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(mat(1, 2, &[1.0, 2.0])).unwrap();
    let c = g.constant(mat(2, 1, &[3.0, 4.0])).unwrap();
    let p = g.matmul(a, c).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);

    let z = g.constant(Tensor::zeros(2, 2)).unwrap();
    let p = g.matmul(z, b).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3)).unwrap();
    let b = g.constant(Tensor::zeros(2, 3)).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g
        .constant(mat(3, 3, &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 1000.0, 0.0, 0.0]))
        .unwrap();
    let s = g.softmax_rows(x).unwrap();
    let d = g.value(s).data();
    assert!(close(&d[0..3], &[1.0 / 3.0; 3], 1e-15));
    assert!(close(&d[3..6], &[0.09003, 0.24473, 0.66524], 5e-6));
    assert!((d[6] - 1.0).abs() < 1e-12 && d[7] < 1e-300);
    for row in d.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(mat(2, 2, &[5.0, 5.0, 1.0, 3.0])).unwrap();
    let one = g.constant(mat(1, 2, &[1.0, 1.0])).unwrap();
    let zero = g.constant(mat(1, 2, &[0.0, 0.0])).unwrap();
    let y = g.layer_norm(x, one, zero, LAYER_NORM_EPS).unwrap();
    let d = g.value(y).data();
    assert_eq!(&d[0..2], &[0.0, 0.0]);
    let s = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!(close(&d[2..4], &[-s, s], 1e-15));

    let bias = g.constant(mat(1, 2, &[0.25, -2.0])).unwrap();
    let y = g.layer_norm(x, zero, bias, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -2.0, 0.25, -2.0]);
}

fn small_store<F, T>(build: F) -> (ParamStore, T)
where
    F: FnOnce(&mut Builder<ChaCha8Rng>) -> T,
{
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = {
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Rest,
        };
        build(&mut b)
    };
    (store, t)
}

#[test]
fn feed_forward_matches_scalar_oracle() {
    let (store, ffn) = small_store(|b| FeedForward::new(b, "ffn", 4).unwrap());
    let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect();
    let mut g = Graph::new();
    let xv = g.constant(mat(3, 4, &x)).unwrap();
    let y = ffn.forward(&mut g, &store, xv).unwrap();

    let w1 = store.get(ffn.inner.weight).tensor.data();
    let b1 = store.get(ffn.inner.bias).tensor.data();
    let w2 = store.get(ffn.outer.weight).tensor.data();
    let b2 = store.get(ffn.outer.bias).tensor.data();
    let mut h = naive_matmul(&x, w1, 3, 4, 16);
    for (i, v) in h.iter_mut().enumerate() {
        *v = (*v + b1[i % 16]).max(0.0);
    }
    let mut o = naive_matmul(&h, w2, 3, 16, 4);
    for (i, v) in o.iter_mut().enumerate() {
        *v += b2[i % 4];
    }
    assert!(close(g.value(y).data(), &o, 1e-12));
}

#[test]
fn feed_forward_degenerate_cases() {
    let (mut store, ffn) = small_store(|b| FeedForward::new(b, "ffn", 2).unwrap());
    store.get_mut(ffn.inner.weight).tensor.data_mut().fill(0.0);
    store.get_mut(ffn.inner.bias).tensor.data_mut().fill(-1.0);
    store
        .get_mut(ffn.outer.bias)
        .tensor
        .data_mut()
        .copy_from_slice(&[0.5, 1.5]);
    let mut g = Graph::new();
    let x = g.constant(mat(1, 2, &[3.0, -2.0])).unwrap();
    let y = ffn.forward(&mut g, &store, x).unwrap();
    // Inner pre-activation is −1 everywhere, so only the outer bias survives.
    assert_eq!(g.value(y).data(), &[0.5, 1.5]);
}

fn identity_attention(d: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let (mut store, mha) = small_store(|b| {
        MultiHeadAttention::new(b, "mha", AttentionConfig::new(d, heads).unwrap()).unwrap()
    });
    for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
        let w = store.get_mut(lin.weight).tensor.data_mut();
        w.fill(0.0);
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
    }
    (store, mha)
}

#[test]
fn attention_single_key_copies_value() {
    let (store, mha) = identity_attention(4, 2);
    let mut g = Graph::new();
    let q = g
        .constant(mat(
            3,
            4,
            &[0.3, -1.0, 2.0, 0.1, 5.0, 5.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0],
        ))
        .unwrap();
    let kv = g.constant(mat(1, 4, &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let out = mha.forward(&mut g, &store, q, kv, kv, None).unwrap().out;
    for row in g.value(out).data().chunks(4) {
        assert!(close(row, &[1.0, 2.0, 3.0, 4.0], 1e-15));
    }
}

#[test]
fn attention_picks_matching_orthogonal_key() {
    let (store, mha) = identity_attention(2, 1);
    let mut g = Graph::new();
    let q = g.constant(mat(1, 2, &[40.0, 0.0])).unwrap();
    let k = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let v = g.constant(mat(2, 2, &[7.0, -1.0, 2.0, 9.0])).unwrap();
    let out = mha.forward(&mut g, &store, q, k, v, None).unwrap().out;
    // Scores 40/√2 and 0 give weights 1/(1+e^{-28.28}) and its complement.
    let w = 1.0 / (1.0 + (-40.0 / 2f64.sqrt()).exp());
    let expect = [7.0 * w + 2.0 * (1.0 - w), -w + 9.0 * (1.0 - w)];
    assert!(close(g.value(out).data(), &expect, 1e-12));
    assert!(close(g.value(out).data(), &[7.0, -1.0], 1e-9));
}

#[test]
fn attention_rejects_empty_keys_and_masked_rows() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(1, 2)).unwrap();
    let k = g.constant(Tensor::zeros(0, 2)).unwrap();
    assert!(matches!(
        g.attention(q, k, k, 1, None),
        Err(Error::Contract(_))
    ));
    let k = g.constant(Tensor::zeros(2, 2)).unwrap();
    let mask = AttentionMask::dense(1, 2, vec![false, false]).unwrap();
    assert!(matches!(
        g.attention(q, k, k, 1, Some(&mask)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn attention_mask_zeroes_excluded_keys() {
    let mut g = Graph::new();
    let q = g.constant(mat(2, 2, &[1.0, 0.5, -0.3, 0.2])).unwrap();
    let k = g
        .constant(mat(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
        .unwrap();
    let mask = AttentionMask::groups(vec![0, 1], vec![0, 1, 1]);
    let a = g.attention(q, k, k, 2, Some(&mask)).unwrap();
    let (heads, nq, nk, w) = g.attention_weights(a).unwrap();
    for h in 0..heads {
        for i in 0..nq {
            let row = &w[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (kk, &x) in row.iter().enumerate() {
                if !mask.allowed(i, kk) {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }
}

#[test]
fn backward_linear_form_and_cross_entropy() {
    let mut g = Graph::new();
    let mut store = ParamStore::new();
    let w = g.variable(mat(1, 3, &[0.5, -1.0, 2.0])).unwrap();
    let x = g.constant(mat(1, 3, &[3.0, 4.0, -5.0])).unwrap();
    let p = g.mul(w, x).unwrap();
    let loss = g.sum_all(p).unwrap();
    let grads = g.backward(loss, &mut store).unwrap();
    assert_eq!(grads.get(w).unwrap(), &[3.0, 4.0, -5.0]);

    let mut g = Graph::new();
    let logits = g.variable(mat(1, 3, &[1.0, 2.0, 3.0])).unwrap();
    let ce = g.cross_entropy(logits, &[0]).unwrap();
    let grads = g.backward(ce, &mut store).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let expect = [1f64.exp() / z - 1.0, 2f64.exp() / z, 3f64.exp() / z];
    assert!(close(grads.get(logits).unwrap(), &expect, 1e-15));
}

#[test]
fn backward_rejects_non_scalar_and_skips_frozen() {
    let mut store = ParamStore::new();
    let id = store
        .add("w", mat(1, 2, &[1.0, 2.0]), ParamGroup::Rest)
        .unwrap();
    store.set_frozen("w", true);
    let mut g = Graph::new();
    let w = g.param(&store, id).unwrap();
    assert!(!g.requires_grad(w));
    let s = g.sum_all(w).unwrap();
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
    let v = g.variable(mat(1, 2, &[1.0, 1.0])).unwrap();
    assert!(matches!(g.backward(v, &mut store), Err(Error::Contract(_))));
}

#[test]
fn finite_difference_quadratic_and_zero() {
    let mut store = ParamStore::new();
    let id = store
        .add("theta", Tensor::scalar(3.0), ParamGroup::Rest)
        .unwrap();
    let opts = GradCheckOptions::default();
    let f = |s: &ParamStore| Ok(s.get(id).tensor.item().powi(2));
    let rep = check_scalar(&mut store, vec![vec![6.0]], f, &opts).unwrap();
    assert!(rep.passed && rep.max_rel_err < 1e-9, "{rep:?}");
    let rep = check_scalar(&mut store, vec![vec![0.0]], |_| Ok(0.0), &opts).unwrap();
    assert!(rep.passed && rep.max_rel_err == 0.0);
    let bad = check_scalar(&mut store, vec![vec![5.0]], f, &opts).unwrap();
    assert!(!bad.passed);
}

#[test]
fn finite_difference_skips_non_finite_points() {
    let mut store = ParamStore::new();
    let id = store
        .add("theta", Tensor::scalar(0.0), ParamGroup::Rest)
        .unwrap();
    let f = |s: &ParamStore| {
        let t = s.get(id).tensor.item();
        Ok(if t > 0.0 { f64::NAN } else { t })
    };
    let rep = check_scalar(&mut store, vec![vec![1.0]], f, &GradCheckOptions::default()).unwrap();
    assert_eq!((rep.checked, rep.skipped), (0, 1));
}

/// Layers composed into one loss pass the finite-difference check.
#[test]
fn composed_layers_pass_gradient_check() {
    let (mut store, (mha, ln, ffn)) = small_store(|b| {
        let cfg = AttentionConfig::new(4, 2).unwrap();
        (
            MultiHeadAttention::new(b, "mha", cfg).unwrap(),
            LayerNorm::new(b, "ln", 4).unwrap(),
            FeedForward::new(b, "ffn", 4).unwrap(),
        )
    });
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let loss = |g: &mut Graph, s: &ParamStore| -> luna_core::Result<Var> {
        let xv = g.constant(mat(3, 4, &x))?;
        let a = mha.forward(g, s, xv, xv, xv, None)?.out;
        let h = g.add(xv, a)?;
        let h = ln.forward(g, s, h)?;
        let f = ffn.forward(g, s, h)?;
        let sq = g.mul(f, f)?;
        g.sum_all(sq)
    };
    let mut g = Graph::new();
    let l = loss(&mut g, &store).unwrap();
    g.backward(l, &mut store).unwrap();
    let analytic = collect_grads(&store);
    let rep = check_scalar(
        &mut store,
        analytic,
        |s| {
            let mut g = Graph::new();
            let l = loss(&mut g, s)?;
            Ok(g.value(l).item())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn adam_single_step_trace() {
    let mut store = ParamStore::new();
    let id = store
        .add("w", mat(1, 2, &[1.0, -1.0]), ParamGroup::Rest)
        .unwrap();
    let enc = store
        .add("e", mat(1, 1, &[0.0]), ParamGroup::Encoder)
        .unwrap();
    store.get_mut(id).grad = vec![0.5, -2.0];
    store.get_mut(enc).grad = vec![1.0];
    let mut st = AdamState::new(&store);
    let sched = WarmupLinearSchedule::new(10, 0.1);
    let cfg = AdamConfig::default();
    let peaks = GroupRates {
        encoder: 0.01,
        rest: 0.1,
    };
    let rates = adam_step(&mut store, &mut st, &cfg, peaks, &sched, 1).unwrap();
    assert_eq!(rates.rest, 0.1);
    // m̂ = g and v̂ = g² after one step, so each coordinate moves by lr·g/(|g|+eps).
    let expect: Vec<f64> = [(1.0, 0.5), (-1.0, -2.0)]
        .iter()
        .map(|&(w, g): &(f64, f64)| w - 0.1 * g / (g.abs() + 1e-8))
        .collect();
    assert!(close(store.get(id).tensor.data(), &expect, 1e-15));
    assert!((store.get(enc).tensor.item() + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
}

#[test]
fn adam_skips_frozen_and_rejects_uninitialized() {
    let mut store = ParamStore::new();
    let id = store
        .add("schema.w", mat(1, 2, &[1.0, 2.0]), ParamGroup::Encoder)
        .unwrap();
    store.get_mut(id).grad = vec![1.0, 1.0];
    store.set_frozen("schema.", true);
    let before = store.get(id).tensor.clone();
    let mut st = AdamState::new(&store);
    let sched = WarmupLinearSchedule::new(10, 0.0);
    let peaks = GroupRates {
        encoder: 1.0,
        rest: 1.0,
    };
    adam_step(
        &mut store,
        &mut st,
        &AdamConfig::default(),
        peaks,
        &sched,
        3,
    )
    .unwrap();
    assert_eq!(store.get(id).tensor, before);
    let mut empty = AdamState::default();
    assert!(adam_step(
        &mut store,
        &mut empty,
        &AdamConfig::default(),
        peaks,
        &sched,
        0
    )
    .is_err());
}

#[test]
fn schedule_warmup_and_decay() {
    let s = WarmupLinearSchedule::new(100, 0.1);
    assert_eq!(s.warmup_steps, 10);
    assert_eq!(s.factor(0), 0.0);
    assert_eq!(s.factor(5), 0.5);
    assert_eq!(s.factor(10), 1.0);
    assert_eq!(s.factor(55), 0.5);
    assert_eq!(s.factor(100), 0.0);
    assert_eq!(WarmupLinearSchedule::new(95, 0.1).warmup_steps, 10);
}

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
}

proptest! {
    #[test]
    fn matmul_agrees_with_scalar_loops(a in matrix_strategy(3, 4), b in matrix_strategy(4, 5)) {
        let mut g = Graph::new();
        let av = g.constant(mat(3, 4, &a)).unwrap();
        let bv = g.constant(mat(4, 5, &b)).unwrap();
        let p = g.matmul(av, bv).unwrap();
        prop_assert!(close(g.value(p).data(), &naive_matmul(&a, &b, 3, 4, 5), 1e-12));
    }

    #[test]
    fn layer_norm_agrees_with_scalar_loops(x in matrix_strategy(3, 4), gain in matrix_strategy(1, 4), bias in matrix_strategy(1, 4)) {
        let mut g = Graph::new();
        let xv = g.constant(mat(3, 4, &x)).unwrap();
        let gv = g.constant(mat(1, 4, &gain)).unwrap();
        let bv = g.constant(mat(1, 4, &bias)).unwrap();
        let y = g.layer_norm(xv, gv, bv, LAYER_NORM_EPS).unwrap();
        prop_assert!(close(g.value(y).data(), &naive_layer_norm(&x, 4, &gain, &bias), 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one(x in matrix_strategy(4, 6)) {
        let mut g = Graph::new();
        let xv = g.constant(mat(4, 6, &x)).unwrap();
        let s = g.softmax_rows(xv).unwrap();
        for row in g.value(s).data().chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one(q in matrix_strategy(3, 4), k in matrix_strategy(5, 4)) {
        let mut g = Graph::new();
        let qv = g.constant(mat(3, 4, &q)).unwrap();
        let kv = g.constant(mat(5, 4, &k)).unwrap();
        let a = g.attention(qv, kv, kv, 2, None).unwrap();
        let (_, _, nk, w) = g.attention_weights(a).unwrap();
        for row in w.chunks(nk) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(x in matrix_strategy(3, 4)) {
        let (store, ffn) = small_store(|b| FeedForward::new(b, "ffn", 4).unwrap());
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(mat(3, 4, &x)).unwrap();
            let y = ffn.forward(&mut g, &store, xv).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
