//! Oracle tests for the teacher: the loss against a straight-line
//! reimplementation with explicit loops, and the gradient against central
//! finite differences.

use ndarray::{Array1, Array4};
use pgn::nn::Tensor;
use pgn::teacher::{Teacher, TeacherSpec, WeightsSource, IMAGENET_NORMALIZATION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_batch(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.5..1.5))
}

/// Independent perceptual-loss oracle: plain nested loops, no layer code,
/// reading the same weights the teacher holds.
fn oracle_pl(teacher: &Teacher<f64>, yhat: &Tensor<f64>, y: &Tensor<f64>, bi: usize) -> f64 {
    let spec = teacher.spec();

    let forward = |img: &Tensor<f64>| -> Vec<Vec<Vec<Vec<f64>>>> {
        // activations[l][c][i][j] per conv layer (post-relu, pre-pool)
        let mut input: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|c| {
                (0..img.shape()[2])
                    .map(|i| (0..img.shape()[3]).map(|j| img[[bi, c, i, j]]).collect())
                    .collect()
            })
            .collect();
        let mut acts = Vec::new();
        for l in 0..spec.num_convs() {
            let (w, b) = teacher.conv_weights(l);
            let c_out = w.shape()[0];
            let c_in = w.shape()[1];
            let h = input[0].len();
            let wd = input[0][0].len();
            let mut out = vec![vec![vec![0.0f64; wd]; h]; c_out];
            for o in 0..c_out {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b[o];
                        for c in 0..c_in {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = i as isize + ki as isize - 1;
                                    let jj = j as isize + kj as isize - 1;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    acc += w[[o, c, ki, kj]]
                                        * input[c][ii as usize][jj as usize];
                                }
                            }
                        }
                        out[o][i][j] = if acc > 0.0 { acc } else { 0.0 };
                    }
                }
            }
            acts.push(out.clone());
            if spec.pool_positions.contains(&l) {
                let mut pooled = vec![vec![vec![0.0f64; wd / 2]; h / 2]; c_out];
                for (o, plane) in out.iter().enumerate() {
                    for i in 0..h / 2 {
                        for j in 0..wd / 2 {
                            pooled[o][i][j] = (plane[2 * i][2 * j]
                                + plane[2 * i][2 * j + 1]
                                + plane[2 * i + 1][2 * j]
                                + plane[2 * i + 1][2 * j + 1])
                                / 4.0;
                        }
                    }
                }
                input = pooled;
            } else {
                input = out;
            }
        }
        acts
    };

    let a_hat = forward(yhat);
    let a_ref = forward(y);
    let mut loss = 0.0;
    for &t in &spec.tap_layers {
        for (ph, pr) in a_hat[t].iter().zip(a_ref[t].iter()) {
            for (rh, rr) in ph.iter().zip(pr.iter()) {
                for (vh, vr) in rh.iter().zip(rr.iter()) {
                    loss += (vh - vr).abs();
                }
            }
        }
    }
    loss
}

/// Small spec exercising pooling and taps without the full tiny width.
fn small_spec() -> TeacherSpec {
    TeacherSpec {
        conv_plan: vec![4, 6, 8],
        pool_positions: vec![0, 1],
        tap_layers: vec![0, 1, 2],
        normalization: IMAGENET_NORMALIZATION,
        weights_source: WeightsSource::TinySeeded,
    }
}

#[test]
fn loss_matches_loop_oracle_on_8x8_fixture() {
    let teacher = Teacher::<f64>::build(small_spec(), 41).unwrap();
    let yhat = rand_batch((2, 3, 8, 8), 1);
    let y = rand_batch((2, 3, 8, 8), 2);
    let pl = teacher.perceptual_loss(&yhat, &y).unwrap();
    for bi in 0..2 {
        let expect = oracle_pl(&teacher, &yhat, &y, bi);
        let got = pl[bi];
        assert!(
            ((got - expect) / expect.max(1e-12)).abs() < 1e-10,
            "batch {bi}: teacher {got}, oracle {expect}"
        );
    }
}

#[test]
fn tiny_teacher_loss_matches_loop_oracle() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let yhat = rand_batch((1, 3, 8, 8), 3);
    let y = rand_batch((1, 3, 8, 8), 4);
    let got = teacher.perceptual_loss(&yhat, &y).unwrap()[0];
    let expect = oracle_pl(&teacher, &yhat, &y, 0);
    assert!(
        ((got - expect) / expect).abs() < 1e-10,
        "teacher {got}, oracle {expect}"
    );
}

#[test]
fn zero_input_with_zero_biases_gives_zero_features() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let x = Array4::zeros((1, 3, 16, 16));
    for f in teacher.features(&x).unwrap() {
        assert!(f.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn features_are_deterministic() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let x = rand_batch((1, 3, 16, 16), 5);
    let a = teacher.features(&x).unwrap();
    let b = teacher.features(&x).unwrap();
    for (fa, fb) in a.iter().zip(b.iter()) {
        assert_eq!(fa, fb);
    }
}

#[test]
fn impulse_response_matches_hand_convolution() {
    // one conv layer, identity-like kernel: passes channel 0 through with a
    // hand-checkable 3x3 stencil
    let spec = TeacherSpec {
        conv_plan: vec![1],
        pool_positions: vec![],
        tap_layers: vec![0],
        normalization: IMAGENET_NORMALIZATION,
        weights_source: WeightsSource::TinySeeded,
    };
    let mut w = Array4::zeros((1, 3, 3, 3));
    w[[0, 0, 1, 1]] = 1.0; // center tap on channel 0
    w[[0, 0, 0, 1]] = 0.5; // plus half the pixel above
    let teacher = Teacher::from_weights(spec, vec![w], vec![Array1::zeros(1)]).unwrap();

    let mut x = Array4::zeros((1, 3, 5, 5));
    x[[0, 0, 2, 2]] = 1.0;
    let feats = teacher.features(&x).unwrap();
    // impulse response: 1.0 at the impulse, 0.5 one row below (kernel offset
    // ki=0 reads the pixel above the output location), rectified
    let f = &feats[0];
    for i in 0..5 {
        for j in 0..5 {
            let expect = if (i, j) == (2, 2) {
                1.0
            } else if (i, j) == (3, 2) {
                0.5
            } else {
                0.0
            };
            assert_eq!(f[[0, 0, i, j]], expect, "at ({i},{j})");
        }
    }
}

#[test]
fn loss_is_zero_on_identical_inputs_and_symmetric() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let a = rand_batch((1, 3, 16, 16), 6);
    let b = rand_batch((1, 3, 16, 16), 7);
    assert_eq!(teacher.perceptual_loss(&a, &a).unwrap()[0], 0.0);
    let ab = teacher.perceptual_loss(&a, &b).unwrap()[0];
    let ba = teacher.perceptual_loss(&b, &a).unwrap()[0];
    assert_eq!(ab, ba, "L1 feature distance must be symmetric");
    assert!(ab > 0.0);
}

#[test]
fn gradient_at_identical_inputs_is_zero() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let y = rand_batch((1, 3, 16, 16), 8);
    let g = teacher.perceptual_grad(&y, &y).unwrap();
    assert!(g.iter().all(|&v| v == 0.0), "sign(0) = 0 convention");
}

#[test]
fn gradient_matches_finite_differences() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let yhat = rand_batch((1, 3, 16, 16), 9);
    let y = rand_batch((1, 3, 16, 16), 10);
    let g = teacher.perceptual_grad(&yhat, &y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 1e-6;
    for _ in 0..50 {
        let i = rng.gen_range(0..yhat.len());
        let mut p = yhat.clone();
        p.as_slice_mut().unwrap()[i] += eps;
        let lp = teacher.perceptual_loss(&p, &y).unwrap()[0];
        let mut m = yhat.clone();
        m.as_slice_mut().unwrap()[i] -= eps;
        let lm = teacher.perceptual_loss(&m, &y).unwrap()[0];
        let num = (lp - lm) / (2.0 * eps);
        let ana = g.as_slice().unwrap()[i];
        let denom = num.abs().max(ana.abs()).max(1e-9);
        assert!(
            ((num - ana) / denom).abs() < 1e-3,
            "coord {i}: numeric {num:.6e} vs analytic {ana:.6e}"
        );
    }
}

#[test]
fn doubling_the_loss_doubles_the_gradient_exactly() {
    // gradient of k*PL via the vjp with k-scaled seeds; k = 2 is exact in
    // floating point
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let yhat = rand_batch((1, 3, 16, 16), 12);
    let y = rand_batch((1, 3, 16, 16), 13);

    let feats_hat = teacher.features(&yhat).unwrap();
    let feats_ref = teacher.features(&y).unwrap();
    let seeds: Vec<Tensor<f64>> = feats_hat
        .iter()
        .zip(feats_ref.iter())
        .map(|(a, b)| {
            let mut s = a.clone();
            s.zip_mut_with(b, |sv, &rv| {
                *sv = if *sv > rv {
                    1.0
                } else if *sv < rv {
                    -1.0
                } else {
                    0.0
                };
            });
            s
        })
        .collect();
    let g1 = teacher.feature_vjp(&yhat, &seeds).unwrap();
    let seeds2: Vec<Tensor<f64>> = seeds.iter().map(|s| s.mapv(|v| 2.0 * v)).collect();
    let g2 = teacher.feature_vjp(&yhat, &seeds2).unwrap();
    ndarray::Zip::from(&g1).and(&g2).for_each(|&a, &b| {
        assert_eq!(2.0 * a, b);
    });

    // and the vjp with sign seeds reproduces perceptual_grad
    let g = teacher.perceptual_grad(&yhat, &y).unwrap();
    assert_eq!(g, g1);
}

#[test]
fn structure_contains_no_max_pooling() {
    for spec in [TeacherSpec::tiny(), TeacherSpec::vgg19()] {
        let teacher = Teacher::<f32>::build(spec, 0).unwrap();
        let structure = teacher.structure();
        assert!(structure.iter().any(|s| s.contains("avgpool")));
        assert!(
            structure.iter().all(|s| !s.to_lowercase().contains("max")),
            "teacher graph must not contain max pooling"
        );
    }
}

#[test]
fn vgg19_parameter_count_is_exact() {
    let spec = TeacherSpec::vgg19();
    assert_eq!(spec.param_count(), 12_944_960);
    let teacher = Teacher::<f32>::build(spec, 0).unwrap();
    assert_eq!(teacher.param_count(), 12_944_960);
}

#[test]
fn odd_spatial_size_at_a_pool_is_a_dimension_error() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    // 20x20 halves to 10 then 5: pooling after conv 3 (0-based index 3)
    // would need an even size
    let x = rand_batch((1, 3, 20, 20), 14);
    let err = teacher.features(&x).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("dimension"), "unexpected error kind: {msg}");
    assert!(msg.contains("conv 5"), "error must name the layer: {msg}");
}

#[test]
fn shape_mismatch_is_a_dimension_error() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 7).unwrap();
    let a = rand_batch((1, 3, 16, 16), 15);
    let b = rand_batch((1, 3, 32, 32), 16);
    assert!(teacher.perceptual_loss(&a, &b).is_err());
}

#[test]
fn weight_roundtrip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.tensors");
    let teacher = Teacher::<f32>::build(small_spec(), 99).unwrap();
    teacher.save_weights(&path).unwrap();
    let loaded = Teacher::<f32>::load_weights(small_spec(), &path).unwrap();
    let x = Array4::from_elem((1, 3, 8, 8), 0.3f32);
    assert_eq!(
        teacher.perceptual_loss(&x, &x.mapv(|v| v * 0.5)).unwrap(),
        loaded.perceptual_loss(&x, &x.mapv(|v| v * 0.5)).unwrap()
    );
}
