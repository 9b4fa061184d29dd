//! Head-construction tests: pinned constants, the stop-gradient MSE
//! identity against finite differences, boundedness of constrained proxies,
//! and the interval-hull contraction argument for gradient descent in a
//! constrained field.

use ndarray::Array4;
use pgn::heads::{
    backbone_grad, constrain, grad_from_proxy, proxy_bounds, synthesize, HeadVariant,
};
use pgn::networks::{build_backbone, concat_pair, BackboneSpec};
use pgn::nn::Tensor;
use pgn::teacher::IMAGENET_NORMALIZATION;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NORM: pgn::teacher::Normalization = IMAGENET_NORMALIZATION;

fn rand_batch(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-2.0..2.0))
}

#[test]
fn constrain_at_zero_matches_pinned_arithmetic() {
    let raw = Array4::<f64>::zeros((1, 3, 2, 2));
    let p = constrain(&raw, 1.1, &NORM);
    // red channel: 1.1 * (0.5 - 0.485) / 0.229
    let expect_r = 1.1 * (0.5 - 0.485) / 0.229;
    assert!((p[[0, 0, 0, 0]] - expect_r).abs() < 1e-12);
    assert!((expect_r - 0.0720524017).abs() < 1e-9);
    // green and blue zero points differ
    let expect_g = 1.1 * (0.5 - 0.456) / 0.224;
    assert!((p[[0, 1, 0, 0]] - expect_g).abs() < 1e-12);
}

#[test]
fn constrain_saturates_below_the_upper_bound() {
    let raw = Array4::<f64>::from_elem((1, 3, 1, 1), 40.0);
    let p = constrain(&raw, 1.1, &NORM);
    let (_, hi) = proxy_bounds(1.1, &NORM);
    for c in 0..3 {
        let v = p[[0, c, 0, 0]];
        assert!(v <= hi[c], "channel {c}: {v} exceeds bound {hi:?}");
        assert!(hi[c] - v < 1e-10, "channel {c} should approach its bound");
    }
}

#[test]
fn constrain_zero_point_is_the_channel_mean() {
    // sigmoid(raw) = mean_c  =>  output 0 at beta = 1
    for c in 0..3 {
        let m = NORM.mean[c];
        let logit = (m / (1.0 - m)).ln();
        let mut raw = Array4::<f64>::zeros((1, 3, 1, 1));
        raw[[0, c, 0, 0]] = logit;
        let p = constrain(&raw, 1.0, &NORM);
        assert!(p[[0, c, 0, 0]].abs() < 1e-12, "channel {c}");
    }
}

#[test]
fn proxy_bounds_hold_for_wild_backbone_outputs() {
    let (lo, hi) = proxy_bounds(1.1, &NORM);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = Array4::from_shape_simple_fn((2, 3, 8, 8), || {
        let v: f64 = rng.gen_range(-1e6..1e6);
        v
    });
    let p = constrain(&raw, 1.1, &NORM);
    for c in 0..3 {
        for &v in p.index_axis(ndarray::Axis(1), c).iter() {
            assert!(v >= lo[c] && v <= hi[c], "channel {c}: {v} outside [{}, {}]", lo[c], hi[c]);
        }
    }
}

#[test]
fn grad_from_proxy_is_zero_at_the_fixed_point() {
    let yhat = rand_batch((1, 3, 4, 4), 4);
    let g = grad_from_proxy(&yhat, &yhat, 40.0).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn grad_from_proxy_matches_finite_differences_of_alpha_mse() {
    // alpha * MSE(yhat, P const) is quadratic, so central differences are
    // exact up to rounding
    let yhat = rand_batch((1, 3, 6, 6), 5);
    let proxy = rand_batch((1, 3, 6, 6), 6);
    let alpha = 40.0;
    let g = grad_from_proxy(&yhat, &proxy, alpha).unwrap();
    let n = (3 * 6 * 6) as f64;
    let mse = |x: &Tensor<f64>| -> f64 {
        let mut acc = 0.0;
        ndarray::Zip::from(x).and(&proxy).for_each(|&a, &b| acc += (a - b) * (a - b));
        alpha * acc / n
    };
    // quadratic objective: central differences are truncation-free, so a
    // wide step keeps cancellation noise far below the tolerance
    let eps = 1e-4;
    for i in (0..yhat.len()).step_by(7) {
        let mut p = yhat.clone();
        p.as_slice_mut().unwrap()[i] += eps;
        let mut m = yhat.clone();
        m.as_slice_mut().unwrap()[i] -= eps;
        let num = (mse(&p) - mse(&m)) / (2.0 * eps);
        let ana = g.as_slice().unwrap()[i];
        let denom = num.abs().max(ana.abs()).max(1e-9);
        assert!(
            ((num - ana) / denom).abs() < 1e-6,
            "coord {i}: numeric {num:.9e} vs analytic {ana:.9e}"
        );
    }
}

#[test]
fn doubling_alpha_doubles_the_field_exactly() {
    let yhat = rand_batch((1, 3, 4, 4), 7);
    let proxy = rand_batch((1, 3, 4, 4), 8);
    let g1 = grad_from_proxy(&yhat, &proxy, 20.0).unwrap();
    let g2 = grad_from_proxy(&yhat, &proxy, 40.0).unwrap();
    ndarray::Zip::from(&g1).and(&g2).for_each(|&a, &b| assert_eq!(2.0 * a, b));
}

#[test]
fn direct_head_scales_ones_to_alpha() {
    let yhat = rand_batch((1, 3, 4, 4), 9);
    let y = rand_batch((1, 3, 4, 4), 10);
    let ones = Array4::from_elem((1, 3, 4, 4), 1.0f64);
    let (g, proxy) = synthesize(&yhat, &y, &ones, &HeadVariant::direct(), &NORM).unwrap();
    assert!(proxy.is_none());
    assert!(g.iter().all(|&v| v == 1.0 / 512.0));
}

#[test]
fn unconstrained_proxy_at_yhat_gives_zero_field() {
    let yhat = rand_batch((1, 3, 4, 4), 11);
    let y = rand_batch((1, 3, 4, 4), 12);
    let (g, proxy) = synthesize(&yhat, &y, &yhat, &HeadVariant::unconstrained_proxy(), &NORM).unwrap();
    assert!(proxy.is_some());
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn constrained_field_obeys_the_triangle_bound() {
    let variant = HeadVariant::constrained_proxy();
    let yhat = rand_batch((2, 3, 8, 8), 13);
    let y = rand_batch((2, 3, 8, 8), 14);
    let raw = rand_batch((2, 3, 8, 8), 15).mapv(|v| v * 1e3);
    let (g, _) = synthesize(&yhat, &y, &raw, &variant, &NORM).unwrap();
    let yinf = yhat.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let pmax = (0..3)
        .map(|c| (NORM.mean[c].max(1.0 - NORM.mean[c])) / NORM.std[c])
        .fold(0.0f64, f64::max);
    let bound = variant.alpha * 2.0 / (3.0 * 8.0 * 8.0) * (yinf + variant.beta * pmax);
    for &v in g.iter() {
        assert!(v.abs() <= bound + 1e-12, "{v} exceeds bound {bound}");
    }
}

#[test]
fn synthesize_equals_head_composition_bitwise() {
    let yhat = rand_batch((1, 3, 6, 6), 16);
    let y = rand_batch((1, 3, 6, 6), 17);
    let raw = rand_batch((1, 3, 6, 6), 18);

    let v = HeadVariant::constrained_proxy();
    let (g, p) = synthesize(&yhat, &y, &raw, &v, &NORM).unwrap();
    let p2 = constrain(&raw, v.beta, &NORM);
    let g2 = grad_from_proxy(&yhat, &p2, v.alpha).unwrap();
    assert_eq!(p.unwrap(), p2);
    assert_eq!(g, g2);

    let v = HeadVariant::hybrid();
    let (g, p) = synthesize(&yhat, &y, &raw, &v, &NORM).unwrap();
    let mut z = yhat.clone();
    z.zip_mut_with(&raw, |zv, &bv| *zv -= v.gamma * bv);
    let p2 = constrain(&z, v.beta, &NORM);
    let g2 = grad_from_proxy(&yhat, &p2, v.alpha).unwrap();
    assert_eq!(p.unwrap(), p2);
    assert_eq!(g, g2);
}

#[test]
fn backbone_grad_matches_finite_differences_for_every_variant() {
    // scalar J = <w1, g(b)> + <w2, P(b)>; d J / d b via backbone_grad
    let yhat = rand_batch((1, 3, 5, 5), 19);
    let y = rand_batch((1, 3, 5, 5), 20);
    let b0 = rand_batch((1, 3, 5, 5), 21);
    let w1 = rand_batch((1, 3, 5, 5), 22);
    let w2 = rand_batch((1, 3, 5, 5), 23);

    for variant in [
        HeadVariant::direct(),
        HeadVariant::unconstrained_proxy(),
        HeadVariant::constrained_proxy(),
        HeadVariant::hybrid(),
    ] {
        let j = |b: &Tensor<f64>| -> f64 {
            let (g, p) = synthesize(&yhat, &y, b, &variant, &NORM).unwrap();
            let mut acc = 0.0;
            ndarray::Zip::from(&g).and(&w1).for_each(|&gv, &wv| acc += gv * wv);
            if let Some(p) = p {
                ndarray::Zip::from(&p).and(&w2).for_each(|&pv, &wv| acc += pv * wv);
            }
            acc
        };
        let d_proxy = variant.has_proxy().then(|| w2.clone());
        let db = backbone_grad(&w1, d_proxy.as_ref(), &yhat, &b0, &variant, &NORM).unwrap();
        let eps = 1e-6;
        for i in (0..b0.len()).step_by(11) {
            let mut p = b0.clone();
            p.as_slice_mut().unwrap()[i] += eps;
            let mut m = b0.clone();
            m.as_slice_mut().unwrap()[i] -= eps;
            let num = (j(&p) - j(&m)) / (2.0 * eps);
            let ana = db.as_slice().unwrap()[i];
            let denom = num.abs().max(ana.abs()).max(1e-9);
            assert!(
                ((num - ana) / denom).abs() < 1e-5,
                "{:?} coord {i}: numeric {num:.9e} vs analytic {ana:.9e}",
                variant.kind
            );
        }
    }
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let mut v = HeadVariant::constrained_proxy();
    v.beta = 0.5;
    assert!(v.validate().is_err());
    let mut v = HeadVariant::direct();
    v.alpha = 0.0;
    assert!(v.validate().is_err());
    let mut v = HeadVariant::hybrid();
    v.gamma = 0.0;
    assert!(v.validate().is_err());
}

/// Gradient descent in a constrained field stays inside the interval hull of
/// the start point and the proxy bounds: each step is a convex combination
/// `x + s * (P - x)` with `s = eta * alpha * 2 / (C*H*W) <= 1` and `P`
/// strictly inside the bounds.
#[test]
fn constrained_descent_stays_in_the_interval_hull() {
    let variant = HeadVariant::constrained_proxy();
    let spec = BackboneSpec::resnet_desk(4, 4);
    let backbone = build_backbone::<f64>(&spec, 33).unwrap();
    let (h, w) = (8, 8);
    let y = rand_batch((1, 3, h, w), 24);
    let mut x = rand_batch((1, 3, h, w), 25).mapv(|v| v * 2.0);

    let chw = (3 * h * w) as f64;
    let s = variant.alpha * 2.0 / chw; // eta = 1: s = 80/192 < 1
    assert!(s <= 1.0);
    let eta = 1.0;

    let (lo, hi) = proxy_bounds(variant.beta, &NORM);
    let hull: Vec<(f64, f64)> = (0..3)
        .flat_map(|c| {
            x.index_axis(ndarray::Axis(1), c)
                .iter()
                .map(|&v| (v.min(lo[c]), v.max(hi[c])))
                .collect::<Vec<_>>()
        })
        .collect();

    for step in 0..2_000 {
        let input = concat_pair(&x, &y).unwrap();
        let b = backbone.forward(&input);
        let (g, _) = synthesize(&x, &y, &b, &variant, &NORM).unwrap();
        x.zip_mut_with(&g, |xv, &gv| *xv -= eta * gv);
        for (c, (v, &(lo, hi))) in x
            .iter()
            .zip(hull.iter())
            .enumerate()
        {
            assert!(
                *v >= lo && *v <= hi,
                "step {step}, element {c}: {v} left hull [{lo}, {hi}]"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The direct head's output is exactly linear in the backbone output
    /// (alpha = 1/512 is a power of two, so scaling commutes bitwise).
    #[test]
    fn direct_head_is_exactly_linear(scale in -4.0f64..4.0, seed in 0u64..1000) {
        let yhat = rand_batch((1, 3, 4, 4), seed);
        let y = rand_batch((1, 3, 4, 4), seed + 1);
        let b = rand_batch((1, 3, 4, 4), seed + 2);
        let v = HeadVariant::direct();
        let (g1, _) = synthesize(&yhat, &y, &b, &v, &NORM).unwrap();
        let (g2, _) = synthesize(&yhat, &y, &b.mapv(|x| x * scale), &v, &NORM).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            prop_assert_eq!(a * scale, *b);
        }
    }

    /// Proxy bounds hold for arbitrary finite backbone outputs.
    #[test]
    fn constrained_proxy_is_always_bounded(mag in 0.0f64..100.0, seed in 0u64..1000) {
        let raw = rand_batch((1, 3, 4, 4), seed).mapv(|v| v * mag.exp().min(1e30));
        let p = constrain(&raw, 1.1, &NORM);
        let (lo, hi) = proxy_bounds(1.1, &NORM);
        for c in 0..3 {
            for &v in p.index_axis(ndarray::Axis(1), c).iter() {
                prop_assert!(v >= lo[c] && v <= hi[c]);
            }
        }
    }
}
