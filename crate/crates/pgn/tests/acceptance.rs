//! Acceptance suite: one test per criterion, each printing a summary line
//! (visible with `--nocapture`). Criteria 4-6 evaluate the desk-trained
//! checkpoints shipped under `assets/checkpoints/`; retrain them with
//! `pgn train --config configs/desk-train-{constrained,direct}.toml`.
//!
//! 1. teacher gradient vs central finite differences (rel err < 1e-3)
//! 2. stop-gradient MSE identity vs finite differences (rel err < 1e-6)
//! 3. interval-hull contraction over 10,000 descent steps (0 violations)
//! 4. stability: constrained proxy never diverges over 20 fits of T=2000;
//!    the direct head fails (diverged+stagnated) at least as often
//! 5. usefulness: constrained-PGN fits beat MSE-only fits on final teacher
//!    loss for >= 7 of 10 held-out images
//! 6. mean held-out cosine > 0.3 and above the untrained baseline
//! 7. exact counting: VGG-19 params/MACs, backbone parameter budgets
//! 8. surrogate step with the real gradient == standard training step
//! 9. byte-identical metrics from two fixed-seed training runs

use ndarray::Array4;
use pgn::data::ImageDataset;
use pgn::fit::{cosine_batch, dip_fit, FitConfig, FitResult, GradientSource, LossMode, Verdict};
use pgn::heads::{grad_from_proxy, proxy_bounds, synthesize, HeadVariant};
use pgn::networks::{
    build_autoencoder, build_backbone, concat_pair, AutoencoderSpec, BackboneSpec,
    DipGeneratorSpec, PgnModel,
};
use pgn::nn::adam::{Adam, AdamConfig};
use pgn::nn::{param_count, zero_grads, Tensor};
use pgn::teacher::{Teacher, TeacherSpec, IMAGENET_NORMALIZATION};
use pgn::trainer::{surrogate_step, Augmentor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

const DESK_IMAGE_SIZE: usize = 64;
const STABILITY_FITS: usize = 20;
const STABILITY_ITERS: usize = 2_000;
const USEFULNESS_IMAGES: usize = 10;
const USEFULNESS_WINS_REQUIRED: usize = 7;
const COSINE_FLOOR: f64 = 0.3;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn desk_teacher() -> &'static Teacher<f32> {
    static T: OnceLock<Teacher<f32>> = OnceLock::new();
    T.get_or_init(|| Teacher::build(TeacherSpec::tiny(), 77).unwrap())
}

fn holdout_targets() -> &'static Vec<Tensor<f32>> {
    static TARGETS: OnceLock<Vec<Tensor<f32>>> = OnceLock::new();
    TARGETS.get_or_init(|| {
        let ds = ImageDataset::load_dir(&workspace_root().join("assets/dataset"))
            .expect("bundled dataset present");
        let (_, holdout) = ds.split(32);
        assert!(holdout.len() >= STABILITY_FITS);
        let teacher = desk_teacher();
        holdout
            .iter()
            .take(STABILITY_FITS)
            .map(|raw| {
                // center crop + resize to the generator's output size
                let (h, w) = (raw.shape()[1], raw.shape()[2]);
                let side = h.min(w);
                let crop = raw
                    .slice(ndarray::s![
                        ..,
                        (h - side) / 2..(h - side) / 2 + side,
                        (w - side) / 2..(w - side) / 2 + side
                    ])
                    .to_owned()
                    .mapv(|v| v as f32);
                let resized = pgn::trainer::augment::resize_bilinear(
                    &crop,
                    DESK_IMAGE_SIZE,
                    DESK_IMAGE_SIZE,
                );
                pgn::teacher::normalize(
                    &resized.insert_axis(ndarray::Axis(0)).to_owned(),
                    teacher.normalization(),
                )
            })
            .collect()
    })
}

fn load_checkpoint(name: &str) -> PgnModel<f32> {
    let path = workspace_root().join("assets/checkpoints").join(name);
    PgnModel::<f32>::load(&path).unwrap_or_else(|e| {
        panic!(
            "missing desk checkpoint {} ({e}); train it with \
             `cargo run --release -p pgn -- train --config configs/desk-train-…`",
            path.display()
        )
    })
}

fn fit_config(seed: u64) -> FitConfig {
    FitConfig {
        total_iters: STABILITY_ITERS,
        step_size: 0.01,
        loss_mode: LossMode::Pgn,
        lambda_mse: 20.0,
        divergence_factor: 2.0,
        stagnation_patience: 2_000,
        seed,
    }
}

fn run_fits(source: &GradientSource<f32>, n: usize) -> Vec<FitResult<f32>> {
    use rayon::prelude::*;
    let targets = holdout_targets();
    let teacher = desk_teacher();
    let gen = DipGeneratorSpec::default();
    targets[..n]
        .par_iter()
        .enumerate()
        .map(|(i, t)| dip_fit(t, &gen, source, teacher, &fit_config(9000 + i as u64)).unwrap())
        .collect()
}

fn constrained_fits() -> &'static Vec<FitResult<f32>> {
    static FITS: OnceLock<Vec<FitResult<f32>>> = OnceLock::new();
    FITS.get_or_init(|| {
        let model = load_checkpoint("desk-constrained.ckpt");
        run_fits(&GradientSource::Pgn(&model), STABILITY_FITS)
    })
}

// --- criterion 1 -------------------------------------------------------------

#[test]
fn criterion_1_gradient_oracle_matches_finite_differences() {
    let start = std::time::Instant::now();
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let yhat = Array4::from_shape_simple_fn((1, 3, 32, 32), || rng.gen_range(-1.5..1.5));
    let y = Array4::from_shape_simple_fn((1, 3, 32, 32), || rng.gen_range(-1.5..1.5));
    let grad = teacher.perceptual_grad(&yhat, &y).unwrap();
    let l0 = teacher.perceptual_loss(&yhat, &y).unwrap()[0];

    // The loss is piecewise linear in each coordinate, so any probe step is
    // truncation-free away from the L1/rectifier kinks; a nonzero second
    // difference flags a kink inside the probe interval and the coordinate
    // is redrawn (the check is specified away from kinks).
    let eps = 1e-4;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 100 {
        attempts += 1;
        assert!(attempts < 1000, "too many kink-adjacent coordinates");
        let i = rng.gen_range(0..yhat.len());
        let mut p = yhat.clone();
        p.as_slice_mut().unwrap()[i] += eps;
        let lp = teacher.perceptual_loss(&p, &y).unwrap()[0];
        let mut m = yhat.clone();
        m.as_slice_mut().unwrap()[i] -= eps;
        let lm = teacher.perceptual_loss(&m, &y).unwrap()[0];
        let diff = lp - lm;
        if (lp + lm - 2.0 * l0).abs() > 0.05 * diff.abs() {
            continue; // kink inside the interval
        }
        let num = diff / (2.0 * eps);
        let ana = grad.as_slice().unwrap()[i];
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-9);
        max_rel = max_rel.max(rel);
        assert!(rel < 1e-3, "coord {i}: rel err {rel:.3e}");
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient oracle took {secs:.1}s, budget is 60s");
    println!(
        "criterion 1 PASS: max rel err {max_rel:.3e} over {checked} coordinates \
         ({attempts} drawn) in {secs:.1}s"
    );
}

// --- criterion 2 -------------------------------------------------------------

#[test]
fn criterion_2_mse_gradient_identity() {
    let mut max_rel: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = (2, 3, 7, 9);
        let yhat = Array4::from_shape_simple_fn(shape, || rng.gen_range(-2.0..2.0));
        let proxy = Array4::from_shape_simple_fn(shape, || rng.gen_range(-2.0..2.0));
        let alpha = rng.gen_range(0.5..80.0);
        let g = grad_from_proxy(&yhat, &proxy, alpha).unwrap();

        let n = (3 * 7 * 9) as f64;
        let mse = |x: &Tensor<f64>| -> f64 {
            let mut acc = 0.0;
            ndarray::Zip::from(x).and(&proxy).for_each(|&a, &b| acc += (a - b) * (a - b));
            alpha * acc / n
        };
        // the objective is quadratic, so central differences carry no
        // truncation error and a wide step drowns the cancellation noise
        let eps = 1e-4;
        for i in (0..yhat.len()).step_by(13) {
            let mut p = yhat.clone();
            p.as_slice_mut().unwrap()[i] += eps;
            let mut m = yhat.clone();
            m.as_slice_mut().unwrap()[i] -= eps;
            // summing the per-image MSEs localizes the derivative to the
            // perturbed image, so one scalar probe covers the whole batch
            let num = (mse(&p) - mse(&m)) / (2.0 * eps);
            let ana = g.as_slice().unwrap()[i];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
            assert!(rel < 1e-6, "seed {seed} coord {i}: rel err {rel:.3e}");
        }
    }
    println!("criterion 2 PASS: max rel err {max_rel:.3e} across random fixtures");
}

// --- criterion 3 -------------------------------------------------------------

#[test]
fn criterion_3_boundedness_contraction_over_ten_thousand_steps() {
    let variant = HeadVariant::constrained_proxy();
    let norm = IMAGENET_NORMALIZATION;
    let spec = BackboneSpec::resnet_desk(4, 4);
    let backbone = build_backbone::<f64>(&spec, 303).unwrap(); // frozen, random
    let (h, w) = (16usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let y: Tensor<f64> = Array4::from_shape_simple_fn((1, 3, h, w), || rng.gen_range(-2.0..2.0));
    let mut x: Tensor<f64> = Array4::from_shape_simple_fn((1, 3, h, w), || rng.gen_range(-3.0..3.0));

    let chw = (3 * h * w) as f64;
    // boundary-adjacent step: eta * alpha * 2 / (C*H*W) = 0.9
    let eta = 0.9 * chw / (2.0 * variant.alpha);
    let s = eta * variant.alpha * 2.0 / chw;
    assert!(s > 0.0 && s <= 1.0);

    let (lo, hi) = proxy_bounds(variant.beta, &norm);
    let hull: Vec<(f64, f64)> = (0..3)
        .flat_map(|c| {
            x.index_axis(ndarray::Axis(1), c)
                .iter()
                .map(|&v| (v.min(lo[c]), v.max(hi[c])))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut violations = 0u64;
    for _ in 0..10_000 {
        let input = concat_pair(&x, &y).unwrap();
        let b = backbone.forward(&input);
        let (g, _) = synthesize(&x, &y, &b, &variant, &norm).unwrap();
        x.zip_mut_with(&g, |xv, &gv| *xv -= eta * gv);
        for (v, &(lo, hi)) in x.iter().zip(hull.iter()) {
            if *v < lo || *v > hi {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0, "pixels left the interval hull");
    println!("criterion 3 PASS: 0 hull violations over 10,000 steps (step fraction {s:.2})");
}

// --- criteria 4 and 5 ---------------------------------------------------------

#[test]
fn criterion_4_stability_table_at_desk_scale() {
    let constrained = constrained_fits();
    let n_div_constrained = constrained
        .iter()
        .filter(|r| r.outcome.verdict == Verdict::Diverged)
        .count();
    let n_stag_constrained = constrained
        .iter()
        .filter(|r| r.outcome.verdict == Verdict::Stagnated)
        .count();
    assert_eq!(
        n_div_constrained, 0,
        "constrained-proxy fits must never diverge"
    );

    let direct_model = load_checkpoint("desk-direct.ckpt");
    let direct = run_fits(&GradientSource::Pgn(&direct_model), STABILITY_FITS);
    let n_div_direct = direct
        .iter()
        .filter(|r| r.outcome.verdict == Verdict::Diverged)
        .count();
    let n_stag_direct = direct
        .iter()
        .filter(|r| r.outcome.verdict == Verdict::Stagnated)
        .count();
    assert!(
        n_div_direct + n_stag_direct >= n_div_constrained + n_stag_constrained,
        "direct head must fail at least as often: direct {n_div_direct}+{n_stag_direct} vs \
         constrained {n_div_constrained}+{n_stag_constrained}"
    );
    println!(
        "criterion 4 PASS: constrained {n_div_constrained} diverged / {n_stag_constrained} \
         stagnated; direct {n_div_direct} diverged / {n_stag_direct} stagnated over \
         {STABILITY_FITS} fits of T={STABILITY_ITERS}"
    );
}

#[test]
fn criterion_5_pgn_fits_beat_mse_fits_on_teacher_loss() {
    let pgn_fits = &constrained_fits()[..USEFULNESS_IMAGES];
    let mse_fits = run_fits(&GradientSource::MseOnly, USEFULNESS_IMAGES);
    let mut wins = 0;
    for (i, (p, m)) in pgn_fits.iter().zip(mse_fits.iter()).enumerate() {
        let pl_pgn = *p.trace.last().unwrap();
        let pl_mse = *m.trace.last().unwrap();
        if pl_pgn < pl_mse {
            wins += 1;
        }
        println!("  image {i}: final PL pgn {pl_pgn:.1} vs mse {pl_mse:.1}");
    }
    assert!(
        wins >= USEFULNESS_WINS_REQUIRED,
        "PGN won only {wins}/{USEFULNESS_IMAGES} (need {USEFULNESS_WINS_REQUIRED})"
    );
    println!("criterion 5 PASS: PGN beat MSE on {wins}/{USEFULNESS_IMAGES} held-out images");
}

// --- criterion 6 ---------------------------------------------------------------

/// Cosine measured on blurry partial reconstructions: a short MSE-only fit
/// per held-out image supplies `yhat`, mirroring the pairs single-image
/// fitting actually visits.
fn heldout_cosine(model: &PgnModel<f32>) -> f64 {
    let teacher = desk_teacher();
    let gen = DipGeneratorSpec::default();
    let mut cosines = Vec::new();
    for (i, target) in holdout_targets()[..USEFULNESS_IMAGES].iter().enumerate() {
        let mut cfg = fit_config(600 + i as u64);
        cfg.total_iters = 150;
        cfg.loss_mode = LossMode::MseOnly;
        let partial = dip_fit(target, &gen, &GradientSource::MseOnly, teacher, &cfg)
            .unwrap()
            .final_image;
        let real = teacher.perceptual_grad(&partial, target).unwrap();
        let (syn, _) = model.synthesize(&partial, target).unwrap();
        if let Some(c) = cosine_batch(&syn, &real)[0] {
            cosines.push(c);
        }
    }
    cosines.iter().sum::<f64>() / cosines.len() as f64
}

#[test]
fn criterion_6_heldout_cosine_beats_floor_and_untrained_baseline() {
    let trained = load_checkpoint("desk-constrained.ckpt");
    let untrained = PgnModel::<f32>::new(
        trained.spec,
        trained.head,
        IMAGENET_NORMALIZATION,
        trained.seed, // the exact step-0 initialization of the trained run
    )
    .unwrap();
    let cos_trained = heldout_cosine(&trained);
    let cos_untrained = heldout_cosine(&untrained);
    assert!(
        cos_trained > COSINE_FLOOR,
        "mean held-out cosine {cos_trained:.3} below floor {COSINE_FLOOR}"
    );
    assert!(
        cos_trained > cos_untrained,
        "trained cosine {cos_trained:.3} must exceed the step-0 baseline {cos_untrained:.3}"
    );
    println!(
        "criterion 6 PASS: held-out cosine {cos_trained:.3} (untrained baseline {cos_untrained:.3})"
    );
}

// --- criterion 7 ---------------------------------------------------------------

#[test]
fn criterion_7_exact_counting() {
    let vgg = TeacherSpec::vgg19();
    let params = vgg.param_count();
    assert!(
        (params as f64 - 12_944_960.0).abs() / 12_944_960.0 < 0.001,
        "vgg params {params}"
    );
    assert_eq!(params, 12_944_960);

    let grad_macs = vgg.pair_gradient_macs(224, 224) as f64;
    let rel = (grad_macs - 108.84e9).abs() / 108.84e9;
    assert!(rel < 0.005, "pair-forward x3 MACs {grad_macs:.4e} ({rel:.4} off)");

    let mut lines = vec![format!(
        "vgg19 params {params}, grad MACs {grad_macs:.4e} ({:.2}% from 108.84B)",
        rel * 100.0
    )];
    for (spec, published) in [
        (BackboneSpec::resnet_exact(4), 1.34e6),
        (BackboneSpec::resnet_exact(6), 1.93e6),
        (BackboneSpec::resnet_exact(8), 2.52e6),
        (BackboneSpec::unet_exact(), 1.77e6),
    ] {
        let net = build_backbone::<f32>(&spec, 0).unwrap();
        let p = param_count(net.as_ref()) as f64;
        let rel = (p - published).abs() / published;
        assert!(rel < 0.02, "{}: {p} vs {published} ({rel:.4})", spec.label());
        lines.push(format!("{} {:.0} ({:+.2}%)", spec.label(), p, rel * 100.0));
    }
    println!("criterion 7 PASS: {}", lines.join("; "));
}

// --- criterion 8 ---------------------------------------------------------------

#[test]
fn criterion_8_surrogate_step_oracle_equivalence() {
    let teacher = Teacher::<f64>::build(TeacherSpec::tiny(), 77).unwrap();
    let spec = AutoencoderSpec::new(2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let y = Array4::from_shape_simple_fn((2, 3, 16, 16), || rng.gen_range(-1.0..1.0));

    let mut net_a = build_autoencoder::<f64>(&spec, 801).unwrap();
    let mut opt_a = Adam::new(AdamConfig::with_lr(2e-4));
    surrogate_step(net_a.as_mut(), &mut opt_a, &y, |yhat| {
        teacher.perceptual_grad(yhat, &y)
    })
    .unwrap();

    // oracle: a standard perceptual-loss training step, written out inline
    let mut net_b = build_autoencoder::<f64>(&spec, 801).unwrap();
    let mut opt_b = Adam::new(AdamConfig::with_lr(2e-4));
    let yhat = net_b.forward_t(&y);
    let g = teacher.perceptual_grad(&yhat, &y).unwrap();
    let m = y.shape()[0] as f64;
    zero_grads(net_b.as_mut());
    net_b.backward(&g.mapv(|v| v / m));
    opt_b.step(net_b.as_mut());

    let mut pa: Vec<f64> = Vec::new();
    net_a.visit_params(&mut |p| pa.extend(p.data.iter().copied()));
    let mut pb: Vec<f64> = Vec::new();
    net_b.visit_params(&mut |p| pb.extend(p.data.iter().copied()));
    let mut max_rel: f64 = 0.0;
    for (a, b) in pa.iter().zip(pb.iter()) {
        max_rel = max_rel.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
    }
    assert!(max_rel < 1e-6, "parameter deltas differ by {max_rel:.3e}");
    println!("criterion 8 PASS: max relative parameter deviation {max_rel:.3e}");
}

// --- criterion 9 ---------------------------------------------------------------

#[test]
fn criterion_9_cmd_train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = workspace_root().join("assets/dataset");
    let mut csvs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let cfg_path = dir.path().join(format!("{sub}.toml"));
        std::fs::write(
            &cfg_path,
            format!(
                r#"
seed = 11
out_dir = "{}"

[backbone]
base_channels = 8

[trainer]
image_size = 32
total_steps = 12
metrics_every = 4
checkpoint_every = 12
ae_base_channels = 8

[dataset]
dir = "{}"
"#,
                out.display(),
                data.display()
            ),
        )
        .unwrap();
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_pgn"))
            .args(["train", "--config", cfg_path.to_str().unwrap()])
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1], "metrics CSVs must match byte for byte");
    println!(
        "criterion 9 PASS: two runs produced byte-identical metrics ({} bytes)",
        csvs[0].len()
    );
}

// --- augment sanity used by the suite -------------------------------------------

#[test]
fn holdout_preparation_is_deterministic() {
    // guards the fixtures the heavy criteria share
    let a = &holdout_targets()[0];
    let ds = ImageDataset::load_dir(&workspace_root().join("assets/dataset")).unwrap();
    assert!(ds.len() >= 512, "bundled dataset must hold at least 512 images");
    let aug = Augmentor::new(DESK_IMAGE_SIZE, IMAGENET_NORMALIZATION);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (train_pool, _) = ds.split(32);
    assert!(aug.augment::<f32>(&train_pool[0], &mut rng).is_some());
    assert_eq!(a.shape(), [1, 3, DESK_IMAGE_SIZE, DESK_IMAGE_SIZE]);
}
