//! Finite-difference agreement for every differentiable graph op, on random
//! small shapes, in 64-bit. Backprop must match central differences to a
//! relative error below 1e-4 at h = 1e-5.

mod common;

use std::rc::Rc;

use common::{finite_diff_grads, max_rel_err, pseudo_tensor};
use d2v2::graph::{Graph, RowIndex, Var};
use d2v2::tensor::Tensor;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Builds the op under test, weights its output elementwise with a fixed
/// pseudo-random tensor (so gradients are not accidentally uniform), sums
/// to a scalar, and compares backprop against the finite-difference oracle.
fn check_grads<F>(params: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> (f64, Option<Vec<Tensor<f64>>>, bool) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = g.constant(pseudo_tensor(g.value(out).shape(), 0xC0FFEE));
        let weighted = g.mul(out, w);
        let loss = g.sum_all(weighted);
        let loss_val = g.value(loss).item();
        g.backward(loss).unwrap();
        let grads: Vec<Tensor<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
            .collect();
        (loss_val, Some(grads), true)
    };

    let (_, analytic, _) = eval(params);
    let analytic = analytic.unwrap();
    let numeric = finite_diff_grads(params, H, |vals| eval(vals).0);
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = max_rel_err(a, n);
        prop_assert_or_panic(err < TOL, i, err);
    }
}

fn prop_assert_or_panic(ok: bool, param: usize, err: f64) {
    assert!(ok, "gradient mismatch for param {param}: rel err {err:.3e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn add_broadcast(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let a = pseudo_tensor(&[rows, cols], seed);
        let b = pseudo_tensor(&[cols], seed + 1);
        check_grads(&[a, b], |g, v| g.add(v[0], v[1]));
    }

    #[test]
    fn sub_same_shape(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let a = pseudo_tensor(&[rows, cols], seed);
        let b = pseudo_tensor(&[rows, cols], seed + 1);
        check_grads(&[a, b], |g, v| g.sub(v[0], v[1]));
    }

    #[test]
    fn mul_broadcast(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let a = pseudo_tensor(&[rows, cols], seed);
        let b = pseudo_tensor(&[cols], seed + 1);
        check_grads(&[a, b], |g, v| g.mul(v[0], v[1]));
    }

    #[test]
    fn mul_aliased_square(n in 1usize..6, seed in 0u64..1000) {
        let a = pseudo_tensor(&[1, n], seed);
        check_grads(&[a], |g, v| g.mul(v[0], v[0]));
    }

    #[test]
    fn scale_op(n in 1usize..6, seed in 0u64..1000, c in -2.0f64..2.0) {
        let a = pseudo_tensor(&[1, n], seed);
        check_grads(&[a], |g, v| g.scale(v[0], c));
    }

    #[test]
    fn matmul_plain(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let a = pseudo_tensor(&[m, k], seed);
        let b = pseudo_tensor(&[k, n], seed + 1);
        check_grads(&[a, b], |g, v| g.matmul(v[0], v[1], false));
    }

    #[test]
    fn matmul_batched_weight_broadcast(batch in 1usize..3, m in 1usize..3, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let a = pseudo_tensor(&[batch, m, k], seed);
        let b = pseudo_tensor(&[k, n], seed + 1);
        check_grads(&[a, b], |g, v| g.matmul(v[0], v[1], false));
    }

    #[test]
    fn matmul_batched_trans_b(batch in 1usize..3, m in 1usize..3, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let a = pseudo_tensor(&[batch, m, k], seed);
        let b = pseudo_tensor(&[batch, n, k], seed + 1);
        check_grads(&[a, b], |g, v| g.matmul(v[0], v[1], true));
    }

    #[test]
    fn mul_head_op(batch in 1usize..3, heads in 1usize..4, rest in 1usize..5, seed in 0u64..1000) {
        let a = pseudo_tensor(&[batch, heads, rest], seed);
        let s = pseudo_tensor(&[heads], seed + 1);
        check_grads(&[a, s], |g, v| g.mul_head(v[0], v[1]));
    }

    #[test]
    fn gelu_op(n in 1usize..8, seed in 0u64..1000) {
        let a = pseudo_tensor(&[1, n], seed).map(|v| v * 3.0);
        check_grads(&[a], |g, v| g.gelu(v[0]));
    }

    #[test]
    fn softmax_op(rows in 1usize..3, cols in 1usize..6, seed in 0u64..1000) {
        let a = pseudo_tensor(&[rows, cols], seed).map(|v| v * 2.0);
        check_grads(&[a], |g, v| g.softmax(v[0]));
    }

    #[test]
    fn layer_norm_op(rows in 1usize..3, cols in 2usize..6, seed in 0u64..1000) {
        let a = pseudo_tensor(&[rows, cols], seed);
        let gamma = pseudo_tensor(&[cols], seed + 1).map(|v| v + 1.5);
        let beta = pseudo_tensor(&[cols], seed + 2);
        check_grads(&[a, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn instance_norm_op(batch in 1usize..3, ch in 1usize..3, pos in 2usize..6, seed in 0u64..1000) {
        let a = pseudo_tensor(&[batch, ch, pos], seed);
        check_grads(&[a], |g, v| g.instance_norm(v[0], 1e-5).unwrap());
    }

    #[test]
    fn gather_scatter_ops(batch in 1usize..3, seed in 0u64..1000) {
        let a = pseudo_tensor(&[batch, 5, 2], seed);
        let base = pseudo_tensor(&[batch, 5, 2], seed + 1);
        let idx: RowIndex = Rc::new((0..batch).map(|b| vec![b % 2, 3, 4]).collect());
        let idx2 = idx.clone();
        check_grads(&[a, base], move |g, v| {
            let sel = g.gather_rows(v[0], idx2.clone());
            g.scatter_rows(sel, v[1], idx2.clone())
        });
    }

    #[test]
    fn embed_op(vocab in 2usize..5, width in 1usize..4, seed in 0u64..1000) {
        let w = pseudo_tensor(&[vocab, width], seed);
        let ids: RowIndex = Rc::new(vec![vec![0, vocab - 1, 0], vec![1 % vocab, 0, vocab - 1]]);
        let ids2 = ids.clone();
        check_grads(&[w], move |g, v| g.embed(v[0], ids2.clone()));
    }

    #[test]
    fn concat_op(batch in 1usize..3, ta in 1usize..3, tb in 1usize..3, w in 1usize..4, seed in 0u64..1000) {
        let a = pseudo_tensor(&[batch, ta, w], seed);
        let b = pseudo_tensor(&[batch, tb, w], seed + 1);
        check_grads(&[a, b], |g, v| g.concat1(v[0], v[1]));
    }

    #[test]
    fn permute_reshape_ops(d0 in 1usize..3, d1 in 1usize..4, d2 in 1usize..3, seed in 0u64..1000) {
        let a = pseudo_tensor(&[d0, d1, d2], seed);
        check_grads(&[a], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1]);
            let n = g.value(p).numel();
            g.reshape(p, vec![1, n])
        });
    }

    #[test]
    fn conv1d_strided_op(stride in 1usize..3, seed in 0u64..1000) {
        let x = pseudo_tensor(&[2, 2, 9], seed);
        let w = pseudo_tensor(&[3, 2, 3], seed + 1);
        check_grads(&[x, w], move |g, v| g.conv1d_strided(v[0], v[1], stride).unwrap());
    }

    #[test]
    fn grouped_conv1d_op(groups in prop::sample::select(vec![1usize, 2, 4]), seed in 0u64..1000) {
        let x = pseudo_tensor(&[2, 4, 5], seed);
        let w = pseudo_tensor(&[4, 4 / groups, 3], seed + 1);
        check_grads(&[x, w], move |g, v| g.grouped_conv1d(v[0], v[1], groups).unwrap());
    }

    #[test]
    fn grouped_conv2d_op(groups in prop::sample::select(vec![1usize, 2]), seed in 0u64..1000) {
        let x = pseudo_tensor(&[1, 2, 4, 3], seed);
        let w = pseudo_tensor(&[2, 2 / groups, 3, 3], seed + 1);
        check_grads(&[x, w], move |g, v| g.grouped_conv2d(v[0], v[1], groups).unwrap());
    }

    #[test]
    fn mean_all_op(rows in 1usize..4, cols in 1usize..4, seed in 0u64..1000) {
        let a = pseudo_tensor(&[rows, cols], seed);
        check_grads(&[a], |g, v| g.mean_all(v[0]));
    }

    #[test]
    fn cross_entropy_op(n in 1usize..4, classes in 2usize..5, seed in 0u64..1000) {
        let logits = pseudo_tensor(&[n, classes], seed).map(|v| v * 2.0);
        let labels = Rc::new((0..n).map(|i| i % classes).collect::<Vec<_>>());
        let labels2 = labels.clone();
        check_grads(&[logits], move |g, v| g.softmax_cross_entropy(v[0], labels2.clone()));
    }
}

#[test]
fn two_layer_network_loss_matches_fd() {
    // f = mean((W2·gelu(W1·x + b1) + b2 - y)^2) over a tiny batch
    let x = pseudo_tensor(&[3, 4], 11);
    let y = pseudo_tensor(&[3, 2], 12);
    let params = vec![
        pseudo_tensor(&[4, 5], 1),
        pseudo_tensor(&[5], 2),
        pseudo_tensor(&[5, 2], 3),
        pseudo_tensor(&[2], 4),
    ];
    let eval = |vals: &[Tensor<f64>]| -> (f64, Option<Vec<Tensor<f64>>>) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let h1 = g.matmul(xv, vars[0], false);
        let h1 = g.add(h1, vars[1]);
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, vars[2], false);
        let h2 = g.add(h2, vars[3]);
        let d = g.sub(h2, yv);
        let sq = g.mul(d, d);
        let loss = g.mean_all(sq);
        let lv = g.value(loss).item();
        g.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| g.grad(v).unwrap()).collect();
        (lv, Some(grads))
    };
    let (_, analytic) = eval(&params);
    let analytic = analytic.unwrap();
    let numeric = finite_diff_grads(&params, H, |vals| eval(vals).0);
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert!(max_rel_err(a, n) < TOL);
    }
}

#[test]
fn backward_of_sum_equals_sum_of_backwards() {
    // linearity of gradient accumulation: d(f+g)/dx == df/dx + dg/dx
    let x0 = pseudo_tensor(&[2, 3], 21);

    let run = |combined: bool| -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let sq = g.mul(x, x);
        let f = g.sum_all(sq);
        let gl = g.gelu(x);
        let h = g.mean_all(gl);
        if combined {
            let tot = g.add(f, h);
            g.backward(tot).unwrap();
            let grad = g.grad(x).unwrap();
            (grad.clone(), grad)
        } else {
            g.backward(f).unwrap();
            let gf = g.grad(x).unwrap();
            g.backward(h).unwrap();
            let gh = g.grad(x).unwrap();
            (gf, gh)
        }
    };

    let (combined, _) = run(true);
    let (gf, gh) = run(false);
    for ((&c, &a), &b) in combined.data().iter().zip(gf.data().iter()).zip(gh.data().iter()) {
        assert!((c - (a + b)).abs() < 1e-12);
    }
}

#[test]
fn grouped_conv_groups1_matches_dense_oracle() {
    // independent route: explicit zero-padded array then direct summation
    let x = pseudo_tensor(&[2, 3, 4], 31);
    let w = pseudo_tensor(&[3, 3, 3], 32);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.grouped_conv1d(xv, wv, 1).unwrap();

    let (b, c_in, len, c_out, k) = (2usize, 3usize, 4usize, 3usize, 3usize);
    let pad = (k - 1) / 2;
    // build padded input first, then convolve without bounds logic
    let padded_len = len + 2 * pad;
    let mut padded = vec![0.0f64; b * c_in * padded_len];
    for bi in 0..b {
        for ci in 0..c_in {
            for l in 0..len {
                padded[(bi * c_in + ci) * padded_len + pad + l] = x.data()[(bi * c_in + ci) * len + l];
            }
        }
    }
    let mut expect = vec![0.0f64; b * c_out * len];
    for bi in 0..b {
        for co in 0..c_out {
            for l in 0..len {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for t in 0..k {
                        acc += padded[(bi * c_in + ci) * padded_len + l + t]
                            * w.data()[(co * c_in + ci) * k + t];
                    }
                }
                expect[(bi * c_out + co) * len + l] = acc;
            }
        }
    }
    for (got, want) in g.value(y).data().iter().zip(expect.iter()) {
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn instance_norm_matches_two_pass_oracle() {
    // channel [0, 2, 4]: recompute mean/var with a second routine
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 3], vec![0.0, 2.0, 4.0]));
    let y = g.instance_norm(x, 1e-6).unwrap();

    let vals = [0.0f64, 2.0, 4.0];
    let mean = vals.iter().sum::<f64>() / 3.0;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    for (got, &v) in g.value(y).data().iter().zip(vals.iter()) {
        let want = (v - mean) / (var + 1e-6).sqrt();
        assert!((got - want).abs() < 1e-9);
    }
}
