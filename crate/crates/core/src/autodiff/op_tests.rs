//! Finite-difference checks of every primitive on the tape.

use std::sync::Arc;

use super::*;
use crate::params::{init, ParamStore};

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = crate::rng::stream(seed, "op-tests");
    let mut s = ParamStore::new();
    for &(name, r, c) in shapes {
        s.insert(name, init::uniform(&mut rng, r, c, 1.0));
    }
    s
}

/// Reduces any tensor to a scalar with a fixed random weighting so every
/// output entry influences the loss differently.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let (m, n) = g.shape(x);
    let w = Tensor::from_fn(m, n, |r, c| ((r * 7 + c * 3) as f64 * 0.37).sin() + 0.1);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

fn assert_grad(store: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) {
    let report = check_param_gradients(store, GradCheck::default(), build);
    assert!(
        report.worst() < 1e-6,
        "worst relative error {} at {:?}",
        report.worst(),
        report.worst_name()
    );
}

#[test]
fn matmul_family() {
    let s = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 5, 4), ("bias", 1, 2)], 1);
    assert_grad(&s, |g, s| {
        let a = g.param(s, "a");
        let b = g.param(s, "b");
        let c = g.param(s, "c");
        let bias = g.param(s, "bias");
        let ab = g.matmul(a, b);
        let ab = g.add_row(ab, bias);
        let ac_t = g.matmul_nt(a, c);
        let l1 = weighted_sum(g, ab);
        let l2 = weighted_sum(g, ac_t);
        g.add(l1, l2)
    });
}

#[test]
fn elementwise_family() {
    let s = store_with(&[("x", 3, 4), ("y", 3, 4), ("r", 1, 4), ("k", 3, 1), ("s", 1, 1)], 2);
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x");
        let y = g.param(s, "y");
        let r = g.param(s, "r");
        let k = g.param(s, "k");
        let sc = g.param(s, "s");
        let a = g.mul(x, y);
        let b = g.sub(a, y);
        let c = g.mul_row(b, r);
        let d = g.mul_col(c, k);
        let e = g.scale_by(d, sc);
        let f = g.sigmoid(e);
        let h = g.silu(x);
        let i = g.gelu(y);
        let j = g.one_minus(f);
        let parts = [j, h, i];
        let cat = g.concat_cols(&parts);
        let cat2 = g.concat_rows(&[x, y]);
        let l1 = weighted_sum(g, cat);
        let l2 = weighted_sum(g, cat2);
        g.add(l1, l2)
    });
}

#[test]
fn softmax_masked_and_layer_norm() {
    let s = store_with(&[("x", 4, 5)], 3);
    let mask: Vec<bool> = (0..20).map(|i| i % 3 != 1 || i % 5 == 0).collect();
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x");
        let a = g.softmax(x, None);
        let b = g.softmax(x, Some(&mask));
        let c = g.layer_norm(x, 1e-5);
        let l1 = weighted_sum(g, a);
        let l2 = weighted_sum(g, b);
        let l3 = weighted_sum(g, c);
        let l = g.add(l1, l2);
        g.add(l, l3)
    });
}

#[test]
fn masked_softmax_zeroes_outside_support() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(1, 3, vec![1.0, 2.0, 3.0]));
    let y = g.softmax(x, Some(&[true, false, true]));
    let v = g.value(y);
    assert_eq!(v.at(0, 1), 0.0);
    assert!((v.at(0, 0) + v.at(0, 2) - 1.0).abs() < 1e-15);
}

#[test]
fn gather_reductions_and_losses() {
    let s = store_with(&[("x", 3, 4), ("y", 3, 4)], 4);
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x");
        let y = g.param(s, "y");
        let idx = Arc::new(vec![0, 5, GATHER_ZERO, 11, 5, 2]);
        let gx = g.gather(x, idx, 2, 3);
        let t = g.transpose(y);
        let cs = g.select_cols(y, 1, 3);
        let mse = g.mse(x, y);
        let cos = g.cosine_rows(x, y);
        let l = [weighted_sum(g, gx), weighted_sum(g, t), weighted_sum(g, cs), mse, weighted_sum(g, cos)];
        let mut acc = l[0];
        for &v in &l[1..] {
            acc = g.add(acc, v);
        }
        let m = g.mean(acc);
        g.relu(m)
    });
}

#[test]
fn spectral_ops() {
    for &(h, w) in &[(2usize, 2usize), (4, 4), (3, 4), (4, 5)] {
        let wh = half_width(w);
        let s = store_with(&[("x", h * w, 3), ("z", 2 * h * wh, 3)], 5 + h as u64 * 10 + w as u64);
        assert_grad(&s, |g, s| {
            let x = g.param(s, "x");
            let z = g.param(s, "z");
            let fx = g.rfft2(x, h, w);
            let iz = g.irfft2(z, h, w);
            let l1 = weighted_sum(g, fx);
            let l2 = weighted_sum(g, iz);
            g.add(l1, l2)
        });
    }
}

#[test]
fn rfft_round_trip_is_identity() {
    let s = store_with(&[("x", 12, 2)], 9);
    let mut g = Graph::new();
    let x = g.param(&s, "x");
    let f = g.rfft2(x, 3, 4);
    let back = g.irfft2(f, 3, 4);
    let err = g.value(x).zip_map(g.value(back), |a, b| (a - b).abs()).max_abs();
    assert!(err < 1e-13, "{err}");
}

#[test]
fn block_matmul_freq_scale_threshold_rope() {
    let s = store_with(
        &[("x", 5, 6), ("w", 6, 2), ("alpha", 1, 1), ("beta", 1, 1), ("eta", 1, 1), ("r", 3, 4)],
        6,
    );
    let norms = Arc::new(vec![0.0, 1.0, 2.0_f64.sqrt(), 2.0, 3.0]);
    let cos: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
    let sin: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
    let (cos, sin) = (Arc::new(cos), Arc::new(sin));
    assert_grad(&s, |g, s| {
        let x = g.param(s, "x");
        let w = g.param(s, "w");
        let a = g.param(s, "alpha");
        let b = g.param(s, "beta");
        let e = g.param(s, "eta");
        let y = g.block_matmul(x, w);
        let f = g.freq_scale(a, b, e, norms.clone());
        let y = g.mul_col(y, f);
        let y = g.soft_threshold(y, 0.05);
        let r = g.param(s, "r");
        let r = g.rope(r, cos.clone(), sin.clone());
        let l1 = weighted_sum(g, y);
        let l2 = weighted_sum(g, r);
        g.add(l1, l2)
    });
}

#[test]
fn block_matmul_matches_dense_block_diagonal() {
    let s = store_with(&[("x", 3, 4), ("w", 4, 2)], 7);
    let mut g = Graph::new();
    let x = g.param(&s, "x");
    let w = g.param(&s, "w");
    let y = g.block_matmul(x, w);
    let wv = s.get("w").unwrap();
    let dense = Tensor::from_fn(4, 4, |r, c| if r / 2 == c / 2 { wv.at(r, c % 2) } else { 0.0 });
    let want = s.get("x").unwrap().matmul(&dense);
    assert!(g.value(y).zip_map(&want, |a, b| (a - b).abs()).max_abs() < 1e-14);
}
