use super::gradcheck::{finite_difference_check, DEFAULT_STEP};
use super::nn::{Init, MultiHeadAttention};
use super::*;
use crate::error::Error;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}

#[test]
fn linear_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
    let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let b = Tensor::vector(vec![0.5, -0.5]);
    assert_eq!(linear(&x, &w, &b).unwrap().data(), &[1.5, 1.5]);

    let zero = Tensor::zeros(&[2, 3]);
    let b3 = Tensor::vector(vec![1.0, 2.0, 3.0]);
    assert_eq!(linear(&x, &zero, &b3).unwrap().data(), &[1.0, 2.0, 3.0]);

    assert!(matches!(linear(&x, &Tensor::zeros(&[3, 2]), &b), Err(Error::Shape { .. })));
}

#[test]
fn linear_matches_naive_matmul() {
    let mut rng = seeded_rng(11, 0);
    for _ in 0..20 {
        let (n, p, q) = (rng.int_inclusive(1, 7), rng.int_inclusive(1, 7), rng.int_inclusive(1, 7));
        let x = rng.normal_tensor(&[n, p], 1.0);
        let w = rng.normal_tensor(&[p, q], 1.0);
        let b = rng.normal_tensor(&[q], 1.0);
        let mut expect = naive_matmul(&x, &w);
        for r in 0..n {
            for (e, bb) in expect.row_mut(r).iter_mut().zip(b.data()) {
                *e += bb;
            }
        }
        assert!(linear(&x, &w, &b).unwrap().max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let one = Tensor::vector(vec![1.0, 1.0]);
    let zero = Tensor::vector(vec![0.0, 0.0]);
    let y = layer_norm(&Tensor::from_rows(&[vec![-1.0, 1.0]]), &one, &zero, 1e-12).unwrap();
    assert!(close(y.data(), &[-1.0, 1.0], 1e-9));

    // constant rows normalize to the bias
    let b = Tensor::vector(vec![0.25, -3.0]);
    let y = layer_norm(&Tensor::from_rows(&[vec![5.0, 5.0]]), &one, &b, 1e-5).unwrap();
    assert!(close(y.data(), b.data(), 1e-12));

    assert!(layer_norm(&Tensor::zeros(&[2, 3]), &one, &zero, 1e-5).is_err());
}

#[test]
fn layer_norm_statistics_and_shift_invariance() {
    let mut rng = seeded_rng(12, 0);
    let d = 9;
    let one = Tensor::full(&[d], 1.0);
    let zero = Tensor::zeros(&[d]);
    for _ in 0..20 {
        let x = rng.normal_tensor(&[4, d], 2.0);
        let y = layer_norm(&x, &one, &zero, 1e-10).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-8);
        }
        let shift = rng.normal() * 10.0;
        let y2 = layer_norm(&x.map(|v| v + shift), &one, &zero, 1e-10).unwrap();
        assert!(y.max_abs_diff(&y2) < 1e-9);
    }
}

#[test]
fn softmax_examples() {
    let y = softmax(&Tensor::vector(vec![1.0, 0.0]), 1.0).unwrap();
    assert!(close(y.data(), &[0.731_058_578_6, 0.268_941_421_4], 1e-9));
    let y = softmax(&Tensor::vector(vec![1000.0, 0.0]), 1.0).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0]);
    assert!(y.all_finite());
    let y = softmax(&Tensor::vector(vec![3.0, 3.0, 3.0]), 0.07).unwrap();
    assert!(close(y.data(), &[1.0 / 3.0; 3], 1e-15));
    assert!(matches!(softmax(&Tensor::vector(vec![1.0]), 0.0), Err(Error::Parameter(_))));
    assert!(softmax(&Tensor::vector(vec![1.0]), -1.0).is_err());
}

#[test]
fn softmax_rows_normalized_and_positive() {
    let mut rng = seeded_rng(13, 0);
    for _ in 0..50 {
        let x = rng.normal_tensor(&[5, 7], 20.0);
        let t = 0.05 + rng.uniform();
        let y = softmax(&x, t).unwrap();
        for r in 0..5 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let y = softmax(&Tensor::vector(vec![0.0, -30.0]), 1.0).unwrap();
    assert!(y.data().iter().all(|&p| p > 0.0));
}

fn mha_fixture(d: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, 0);
    let mha = MultiHeadAttention::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "mha",
        d,
        heads,
    )
    .unwrap();
    // move away from the near-zero init so attention is non-trivial
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = rng.normal() * 0.5;
        }
    }
    (store, mha)
}

#[test]
fn attention_single_key_returns_projected_value() {
    let (store, mha) = mha_fixture(4, 2, 1);
    let mut rng = seeded_rng(2, 0);
    let q = rng.normal_tensor(&[3, 4], 1.0);
    let kv = rng.normal_tensor(&[1, 4], 1.0);
    let mut g = Graph::with_params(&store);
    let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
    let y = mha.forward(&mut g, qv, kvv, kvv, 1, 3, 1).unwrap();
    // every query sees the same single value: out = (kv·Wv + bv)·Wo + bo
    let wv = store.get(mha.value.weight);
    let bv = store.get(mha.value.bias);
    let wo = store.get(mha.output.weight);
    let bo = store.get(mha.output.bias);
    let expect = linear(&linear(&kv, wv, bv).unwrap(), wo, bo).unwrap();
    for r in 0..3 {
        assert!(close(g.value(y).row(r), expect.data(), 1e-12));
    }
}

#[test]
fn attention_identical_keys_uniform_weights() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]));
    let k = g.constant(Tensor::from_rows(&vec![vec![1.0, 1.0]; 4]));
    let v = g.constant(Tensor::from_rows(&[
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![2.0, 2.0],
        vec![-1.0, 3.0],
    ]));
    let shape = AttentionShape {
        batch: 1,
        tq: 2,
        tk: 4,
        heads: 1,
    };
    let y = g.attention(q, k, v, shape).unwrap();
    let w = g.attention_weights(y).unwrap();
    assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    assert!(close(g.value(y).row(0), &[0.5, 1.5], 1e-15));
}

#[test]
fn attention_errors() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[1, 3]));
    let shape = AttentionShape {
        batch: 1,
        tq: 1,
        tk: 1,
        heads: 2,
    };
    assert!(matches!(g.attention(q, q, q, shape), Err(Error::Parameter(_))));
    let empty = g.constant(Tensor::zeros(&[0, 3]));
    let shape = AttentionShape {
        batch: 1,
        tq: 1,
        tk: 0,
        heads: 1,
    };
    assert!(matches!(g.attention(q, empty, empty, shape), Err(Error::Input(_))));
}

/// Two heads equal two independent single-head attentions over split
/// projections, concatenated.
#[test]
fn two_heads_compose_from_single_heads() {
    let mut rng = seeded_rng(5, 0);
    let (tq, tk, d) = (3, 5, 4);
    let q = rng.normal_tensor(&[tq, d], 1.0);
    let k = rng.normal_tensor(&[tk, d], 1.0);
    let v = rng.normal_tensor(&[tk, d], 1.0);

    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let shape = AttentionShape {
        batch: 1,
        tq,
        tk,
        heads: 2,
    };
    let both = g.attention(qv, kv, vv, shape).unwrap();

    let half = |t: &Tensor, h: usize| {
        let rows: Vec<Vec<f64>> = (0..t.outer()).map(|r| t.row(r)[h * 2..h * 2 + 2].to_vec()).collect();
        Tensor::from_rows(&rows)
    };
    for h in 0..2 {
        // single-head oracle with scale 1/√(d/heads)
        let (qh, kh, vh) = (half(&q, h), half(&k, h), half(&v, h));
        let scores = naive_matmul(&qh, &Tensor::from_rows(&(0..2).map(|j| (0..tk).map(|i| kh.at(&[i, j])).collect()).collect::<Vec<_>>()));
        let w = softmax(&scores.map(|s| s / 2f64.sqrt()), 1.0).unwrap();
        let out = naive_matmul(&w, &vh);
        for r in 0..tq {
            assert!(close(&g.value(both).row(r)[h * 2..h * 2 + 2], out.row(r), 1e-10));
        }
    }
}

#[test]
fn forward_backward_examples() {
    let mut store = ParamStore::new();
    let theta = store.add("theta", Tensor::vector(vec![3.0])).unwrap();
    let mut g = Graph::with_params(&store);
    let t = g.param(theta);
    let y = g.square(t);
    let y = g.sum(y);
    let (v, grads) = forward_backward(&g, y).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(grads.param(theta).data(), &[6.0]);

    // unused parameters get zero gradient
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = store.add("b", Tensor::vector(vec![5.0])).unwrap();
    let mut g = Graph::with_params(&store);
    let av = g.param(a);
    let y = g.sum(av);
    let (_, grads) = forward_backward(&g, y).unwrap();
    assert_eq!(grads.param(a).data(), &[1.0, 1.0]);
    assert_eq!(grads.param(b).data(), &[0.0]);

    let v = g.param(a);
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
}

#[test]
fn finite_difference_examples() {
    let e = finite_difference_check(
        |g, x| {
            let s = g.square(x);
            Ok(g.sum(s))
        },
        &Tensor::vector(vec![3.0]),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(e <= 1e-9, "{e}");

    let mut rng = seeded_rng(4, 0);
    let theta = rng.normal_tensor(&[6], 1.0);
    let e = finite_difference_check(
        |g, x| {
            let s = g.sin(x);
            Ok(g.sum(s))
        },
        &theta,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(e <= 1e-8, "{e}");

    let e = finite_difference_check(|g, _| Ok(g.constant(Tensor::scalar(2.5))), &theta, DEFAULT_STEP).unwrap();
    assert_eq!(e, 0.0);

    assert!(matches!(
        finite_difference_check(|g, x| Ok(g.sum(x)), &theta, 0.0),
        Err(Error::Parameter(_))
    ));
    assert!(matches!(
        finite_difference_check(|g, _| Ok(g.constant(Tensor::scalar(f64::NAN))), &theta, DEFAULT_STEP),
        Err(Error::Evaluation(_))
    ));
}

#[test]
fn sin_gradient_matches_cos_oracle() {
    let mut rng = seeded_rng(7, 0);
    let theta = rng.normal_tensor(&[5], 2.0);
    let mut g = Graph::new();
    let x = g.constant(theta.clone());
    let s = g.sin(x);
    let y = g.sum(s);
    let grads = g.backward(y).unwrap();
    let expect: Vec<f64> = theta.data().iter().map(|t| t.cos()).collect();
    assert!(close(grads.var(x).unwrap().data(), &expect, 1e-15));
}

#[test]
fn analytic_gradient_matches_oracle_for_softplus_sum() {
    let mut rng = seeded_rng(6, 0);
    let theta = rng.normal_tensor(&[5], 2.0);
    let mut g = Graph::new();
    let x = g.constant(theta.clone());
    let s = g.softplus(x);
    let y = g.sum(s);
    let grads = g.backward(y).unwrap();
    let expect: Vec<f64> = theta.data().iter().map(|t| 1.0 / (1.0 + (-t).exp())).collect();
    assert!(close(grads.var(x).unwrap().data(), &expect, 1e-14));
}
