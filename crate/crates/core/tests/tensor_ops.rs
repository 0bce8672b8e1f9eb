mod common;

use std::sync::Arc;

use common::{conv_loop, rng, uniform_vec};
use proptest::prelude::*;
use rand::RngExt;
use rdfnet_core::optics::{DispersionSpec, Mask, MaskStack};
use rdfnet_core::tensor::{grad_check_multi, LinearOperator, Tape, Tensor, Var};
use rdfnet_core::Error;

fn tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::new(shape.to_vec(), uniform_vec(rng, shape.iter().product(), lo, hi)).unwrap()
}

fn away_from_zero(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.2..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()).unwrap()
}

fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> rdfnet_core::Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    t.sum(p)
}

#[test]
fn conv_matches_direct_loop() {
    let mut r = rng(11);
    for (b, cin, cout, h, w, k, pad) in [(1, 1, 1, 5, 5, 3, 1), (2, 3, 4, 6, 7, 3, 1), (1, 2, 3, 4, 4, 1, 0), (2, 2, 2, 7, 5, 5, 2), (1, 3, 2, 6, 6, 3, 0)] {
        let x = tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);
        let kern = tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let bias = tensor(&mut r, &[cout], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(kern.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, kv, bv, pad).unwrap();
        let expected = conv_loop(x.data(), b, cin, h, w, kern.data(), cout, k, k, bias.data(), pad);
        assert_eq!(tape.value(y).numel(), expected.len());
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }
}

#[test]
fn op_gradients_over_ten_seeds() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let s = [2, 3, 4, 4];
        let w = tensor(&mut r, &s, -1.0, 1.0);

        let x = tensor(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
        let k = tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let b = tensor(&mut r, &[3], -0.5, 0.5);
        let wc = tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let conv = grad_check_multi(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1)?;
                weighted_sum(t, y, &wc)
            },
            &[x, k, b],
            1e-6,
        )
        .unwrap();
        assert!(conv.max_rel_error < 1e-6, "conv seed {seed}: {}", conv.max_rel_error);

        let soft = grad_check_multi(
            |t, v| {
                let y = t.soft_threshold(v[0], v[1])?;
                weighted_sum(t, y, &w)
            },
            &[away_from_zero(&mut r, &s), tensor(&mut r, &s, 0.01, 0.15)],
            1e-6,
        )
        .unwrap();
        assert!(soft.max_rel_error < 1e-6, "soft seed {seed}: {}", soft.max_rel_error);

        let softmax = grad_check_multi(
            |t, v| {
                let y = t.softmax_over_channels(v[0])?;
                weighted_sum(t, y, &w)
            },
            &[tensor(&mut r, &s, -2.0, 2.0)],
            1e-6,
        )
        .unwrap();
        assert!(softmax.max_rel_error < 1e-6, "softmax seed {seed}: {}", softmax.max_rel_error);

        let wu = tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
        let pool = grad_check_multi(
            |t, v| {
                let p = t.avg_pool(v[0], 2)?;
                let u = t.nearest_upsample(p, 5, 5, 2)?;
                let e = t.exp(u)?;
                let l = t.logistic(e)?;
                weighted_sum(t, l, &wu)
            },
            &[tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0)],
            1e-6,
        )
        .unwrap();
        assert!(pool.max_rel_error < 1e-6, "pool seed {seed}: {}", pool.max_rel_error);

        let mask = Mask::random_binary(4, 4, 0.5, &mut r).unwrap();
        let op: Arc<dyn LinearOperator> = MaskStack::new(mask, DispersionSpec::default(), 3).unwrap().operator();
        let wl = tensor(&mut r, &[1, 1, 4, 6], -1.0, 1.0);
        let lin = grad_check_multi(
            |t, v| {
                let y = t.linear(v[0], op.clone(), false)?;
                let q = t.l2_norm_sq(y)?;
                let z = weighted_sum(t, y, &wl)?;
                t.add(q, z)
            },
            &[tensor(&mut r, &[1, 3, 4, 4], -1.0, 1.0)],
            1e-6,
        )
        .unwrap();
        assert!(lin.max_rel_error < 1e-6, "linear seed {seed}: {}", lin.max_rel_error);
    }
}

#[test]
fn backward_contract() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
    let c = t.constant(Tensor::scalar(2.0));
    let y = t.abs(x).unwrap();
    assert!(matches!(t.backward(y), Err(Error::Graph(_))));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, -1.0, 1.0]);
    assert!(t.grad(c).is_none());
    assert!(t.backward(s).is_err());

    let mut t = Tape::new();
    let a = t.constant(Tensor::scalar(1.0));
    let b = t.exp(a).unwrap();
    assert!(t.backward(b).is_err());
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(vec![2, 3]));
    let b = t.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_sums_to_one(vals in prop::collection::vec(-30.0f64..30.0, 2 * 3 * 2 * 2)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 3, 2, 2], vals).unwrap());
        let y = t.softmax_over_channels(x).unwrap();
        let d = t.value(y).data();
        for b in 0..2 {
            for p in 0..4 {
                let s: f64 = (0..3).map(|c| d[(b * 3 + c) * 4 + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logistic_is_strictly_inside_unit_interval(vals in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let mut t = Tape::new();
        let n = vals.len();
        let x = t.constant(Tensor::new(vec![n], vals).unwrap());
        let y = t.logistic(x).unwrap();
        prop_assert!(t.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn soft_threshold_shrinks(v in -5.0f64..5.0, tau in 0.0f64..2.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(v));
        let k = t.constant(Tensor::scalar(tau));
        let y = t.soft_threshold(x, k).unwrap();
        let out = t.value(y).item().unwrap();
        prop_assert!(out.abs() <= v.abs());
        prop_assert!(out == 0.0 || out.signum() == v.signum());
        prop_assert!((out.abs() - (v.abs() - tau).max(0.0)).abs() < 1e-15);
    }

    #[test]
    fn pooling_a_constant_and_upsampling_is_identity(c in -3.0f64..3.0, h in 1usize..9, w in 1usize..9, s in 1usize..4) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![1, 2, h, w], c));
        let p = t.avg_pool(x, s).unwrap();
        let u = t.nearest_upsample(p, h, w, s).unwrap();
        prop_assert!(t.value(u).data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn gradient_of_weighted_sum_is_the_weight(w in prop::collection::vec(-2.0f64..2.0, 6)) {
        let mut t = Tape::new();
        let x = t.variable(Tensor::zeros(vec![6]));
        let wt = Tensor::new(vec![6], w.clone()).unwrap();
        let s = weighted_sum(&mut t, x, &wt).unwrap();
        t.backward(s).unwrap();
        prop_assert_eq!(t.grad(x).unwrap().data(), &w[..]);
    }
}
