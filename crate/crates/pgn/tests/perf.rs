//! Cost-accounting tests: hand-checked convolution MACs, the published
//! VGG-19 figures, additivity, and the measurement harness.

use pgn::networks::{build_backbone, BackboneSpec};
use pgn::nn::conv::Conv2d;
use pgn::nn::{Layer, Seq};
use pgn::perf::{count_macs, count_params, measure};
use pgn::teacher::TeacherSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv_macs_match_the_hand_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // 3x3, 3 -> 64, same padding, 224x224
    let conv = Conv2d::<f32>::new(3, 64, 3, 1, 1, false, &mut rng);
    let (macs, out) = conv.cost((3, 224, 224));
    assert_eq!(macs, 1_728 * 50_176); // 86,704,128 weight MACs
    assert_eq!(out, (64, 224, 224));

    // bias adds one MAC per output element
    let conv_b = Conv2d::<f32>::new(3, 64, 3, 1, 1, true, &mut rng);
    assert_eq!(conv_b.cost((3, 224, 224)).0, 1_728 * 50_176 + 64 * 50_176);
    // and the parameter count matches 3*64*9 + 64
    assert_eq!(count_params(&conv_b), 1_792);
}

#[test]
fn zero_layer_network_costs_nothing() {
    let net = Seq::<f32>::new(vec![]);
    assert_eq!(count_macs(&net, (3, 64, 64)), 0);
    assert_eq!(count_params(&net), 0);
}

#[test]
fn composite_macs_are_additive_over_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Conv2d::<f32>::new(3, 8, 3, 1, 1, true, &mut rng);
    let b = Conv2d::<f32>::new(8, 4, 3, 2, 1, true, &mut rng);
    let (ma, sa) = a.cost((3, 32, 32));
    let (mb, _) = b.cost(sa);
    let seq = Seq::new(vec![
        Box::new(Conv2d::<f32>::new(3, 8, 3, 1, 1, true, &mut ChaCha8Rng::seed_from_u64(2)))
            as Box<dyn Layer<f32>>,
        Box::new(Conv2d::<f32>::new(8, 4, 3, 2, 1, true, &mut rng)),
    ]);
    assert_eq!(count_macs(&seq, (3, 32, 32)), ma + mb);
}

#[test]
fn vgg19_figures_match_the_published_table() {
    let spec = TeacherSpec::vgg19();
    // params: 12.94M exactly, weights + biases
    assert_eq!(spec.param_count(), 12_944_960);

    // gradient MACs at 224: pair forward x3 = 108.84B within 0.5%
    let grad = spec.pair_gradient_macs(224, 224) as f64;
    let published = 108.84e9;
    assert!(
        ((grad - published) / published).abs() < 0.005,
        "pair-forward x3 is {grad:.4e}, published {published:.4e}"
    );
}

#[test]
fn teacher_param_count_agrees_with_enumeration() {
    for spec in [TeacherSpec::tiny(), TeacherSpec::vgg19()] {
        let analytic = spec.param_count();
        let teacher = pgn::teacher::Teacher::<f32>::build(spec, 0).unwrap();
        assert_eq!(analytic, teacher.param_count());
    }
}

#[test]
fn backbone_param_count_agrees_with_independent_traversal() {
    let spec = BackboneSpec::resnet_desk(4, 8);
    let net = build_backbone::<f32>(&spec, 0).unwrap();
    let mut by_hand = 0u64;
    net.visit_params(&mut |p| by_hand += p.data.len() as u64);
    assert_eq!(count_params(net.as_ref()), by_hand);

    // and against the closed form for this preset
    let b = 8u64;
    let expect = (49 * 6 * b + b)                   // stem 7x7
        + (9 * b * 2 * b + 2 * b)                   // downsample
        + 4 * 2 * (9 * 4 * b * b + 2 * b)           // residual blocks
        + (9 * 2 * b * b + b)                       // up conv
        + (49 * b * 3 + 3); // final 7x7
    assert_eq!(count_params(net.as_ref()), expect);
}

#[test]
fn unet_to_resnet4_macs_ratio_is_below_the_published_margin() {
    let r4 = build_backbone::<f32>(&BackboneSpec::resnet_exact(4), 0).unwrap();
    let unet = build_backbone::<f32>(&BackboneSpec::unet_exact(), 0).unwrap();
    let ratio =
        count_macs(unet.as_ref(), (6, 224, 224)) as f64 / count_macs(r4.as_ref(), (6, 224, 224)) as f64;
    assert!(ratio < 0.15, "UNet/ResNet-4 MACs ratio {ratio:.4}");
}

#[test]
fn measurement_needs_at_least_five_repeats() {
    assert!(measure(3, 0, || 1 + 1).is_err());
    let m = measure(5, 1, || std::hint::black_box(vec![0u8; 1 << 16])).unwrap();
    assert!(m.median_wall_s >= 0.0);
    assert_eq!(m.repeats, 5);
}

#[test]
fn repeated_measurements_agree_within_twenty_percent() {
    // a workload big enough to time stably on any host
    let work = || {
        let mut acc = 0.0f64;
        for i in 0..4_000_000u64 {
            acc += (i as f64).sqrt();
        }
        std::hint::black_box(acc)
    };
    let a = measure(5, 1, work).unwrap().median_wall_s;
    let b = measure(5, 1, work).unwrap().median_wall_s;
    let rel = (a - b).abs() / a.max(b);
    assert!(rel < 0.2, "medians {a:.4}s vs {b:.4}s differ by {:.1}%", rel * 100.0);
}
