//! Reverse-mode gradients against central finite differences (step 1e-5).

mod common;

use common::{gradcheck, random_tensor, rng, weighted_sum};
use ketlab_autodiff::{ConvMode, Graph, Mask, LAYER_NORM_EPS};

const TOL: f64 = 1e-5;

#[test]
fn matmul_sum_gradient() {
    let mut r = rng(1);
    let inputs = [random_tensor(&mut r, &[3, 3]), random_tensor(&mut r, &[3, 3])];
    let err = gradcheck(&inputs, |g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        g.sum(p)
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn matmul_batched_rows() {
    let mut r = rng(2);
    let inputs = [random_tensor(&mut r, &[2, 3, 4]), random_tensor(&mut r, &[4, 5])];
    let err = gradcheck(&inputs, |g, v| {
        let p = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, p, 9)
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn bmm_both_layouts() {
    let mut r = rng(3);
    let inputs = [random_tensor(&mut r, &[2, 3, 4]), random_tensor(&mut r, &[2, 4, 5])];
    let err = gradcheck(&inputs, |g, v| {
        let p = g.bmm(v[0], v[1], false).unwrap();
        weighted_sum(g, p, 10)
    });
    assert!(err < TOL, "plain: {err}");
    let inputs = [random_tensor(&mut r, &[2, 3, 4]), random_tensor(&mut r, &[2, 5, 4])];
    let err = gradcheck(&inputs, |g, v| {
        let p = g.bmm(v[0], v[1], true).unwrap();
        weighted_sum(g, p, 11)
    });
    assert!(err < TOL, "transposed: {err}");
}

#[test]
fn softmax_and_masked_softmax() {
    let mut r = rng(4);
    let inputs = [random_tensor(&mut r, &[3, 5])];
    let err = gradcheck(&inputs, |g, v| {
        let p = g.softmax(v[0]).unwrap();
        weighted_sum(g, p, 12)
    });
    assert!(err < TOL, "softmax: {err}");

    let mask = Mask::causal(4);
    let inputs = [random_tensor(&mut r, &[2, 4, 4])];
    let err = gradcheck(&inputs, |g, v| {
        let p = g.masked_softmax(v[0], &mask).unwrap();
        weighted_sum(g, p, 13)
    });
    assert!(err < TOL, "masked: {err}");
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(5);
    let inputs = [
        random_tensor(&mut r, &[4, 6]),
        random_tensor(&mut r, &[6]),
        random_tensor(&mut r, &[6]),
    ];
    let err = gradcheck(&inputs, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
        weighted_sum(g, y, 14)
    });
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn depthwise_conv_both_modes() {
    let mut r = rng(6);
    for mode in [ConvMode::Causal, ConvMode::Symmetric] {
        let inputs = [random_tensor(&mut r, &[2, 5, 3]), random_tensor(&mut r, &[3, 3])];
        let err = gradcheck(&inputs, |g, v| {
            let y = g.depthwise_conv1d(v[0], v[1], mode).unwrap();
            weighted_sum(g, y, 15)
        });
        assert!(err < TOL, "{mode:?}: {err}");
    }
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(7);
    let inputs = [random_tensor(&mut r, &[5, 7])];
    let targets = [0, 3, 6, 2, 2];
    let err = gradcheck(&inputs, |g, v| g.cross_entropy(v[0], &targets).unwrap());
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn elementwise_and_structural_ops() {
    let mut r = rng(8);
    let inputs = [
        random_tensor(&mut r, &[2, 4, 3]),
        random_tensor(&mut r, &[2, 4, 3]),
        random_tensor(&mut r, &[4, 3]),
    ];
    let err = gradcheck(&inputs, |g, v| {
        let a = g.mul(v[0], v[1]).unwrap();
        let b = g.sub(a, v[1]).unwrap();
        let c = g.add_broadcast(b, v[2]).unwrap();
        let c = g.gelu(c);
        let c = g.scale(c, 0.7);
        let cat = g.concat_last(c, v[0]).unwrap();
        let shifted = g.shift_seq(cat, 1).unwrap();
        let head = g.slice_seq(shifted, 1, 3).unwrap();
        let tail = g.slice_seq(cat, 0, 2).unwrap();
        let joined = g.concat_seq(head, tail).unwrap();
        let flat = g.reshape(joined, &[10, 6]).unwrap();
        let out = g.add(flat, flat).unwrap();
        weighted_sum(g, out, 16)
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn heads_rows_distances_embedding() {
    let mut r = rng(9);
    let inputs = [random_tensor(&mut r, &[2, 3, 4]), random_tensor(&mut r, &[5, 4])];
    let err = gradcheck(&inputs, |g, v| {
        let h = g.split_heads(v[0], 2).unwrap();
        let m = g.merge_heads(h, 2).unwrap();
        let rows = g.select_rows(m, &[2, 0, 1, 1]).unwrap();
        let d = g.pairwise_sq_dist(v[0]).unwrap();
        let e = g.embedding(v[1], &[4, 0, 4], &[3]).unwrap();
        let a = weighted_sum(g, rows, 17);
        let b = weighted_sum(g, d, 18);
        let c = weighted_sum(g, e, 19);
        let ab = g.add(a, b).unwrap();
        let total = g.add(ab, c).unwrap();
        let m2 = g.mean(v[0]);
        g.add(total, m2).unwrap()
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn attention_composite() {
    let mut r = rng(10);
    let inputs = [
        random_tensor(&mut r, &[1, 4, 4]),
        random_tensor(&mut r, &[4, 4]),
        random_tensor(&mut r, &[4, 4]),
    ];
    let mask = Mask::causal(4);
    let err = gradcheck(&inputs, |g, v| {
        let q = g.matmul(v[0], v[1]).unwrap();
        let k = g.matmul(v[0], v[2]).unwrap();
        let q = g.split_heads(q, 2).unwrap();
        let k = g.split_heads(k, 2).unwrap();
        let s = g.bmm(q, k, true).unwrap();
        let w = g.masked_softmax(s, &mask).unwrap();
        let o = g.bmm(w, k, false).unwrap();
        let o = g.merge_heads(o, 2).unwrap();
        let o2 = g.matmul(v[0], v[1]).unwrap();
        let o = g.add(o, o2).unwrap();
        weighted_sum(g, o, 20)
    });
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn backward_is_bit_deterministic() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[3, 4]);
    let w = random_tensor(&mut r, &[4, 4]);
    let run = || {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let h = g.matmul(xv, wv).unwrap();
        let s = g.softmax(h).unwrap();
        let l = g.cross_entropy(s, &[0, 1, 2]).unwrap();
        let grads = g.backward(l);
        (grads.get_or_zeros(xv), grads.get_or_zeros(wv))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}
