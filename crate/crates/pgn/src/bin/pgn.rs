//! Command-line driver for the desk-scale pipeline.
//!
//! Exit codes: 0 on success with all artifacts written, 2 for
//! configuration/usage errors (clap uses 2 as well), 1 for aborted runs.

use clap::{Parser, Subcommand};
use pgn::config::{RunConfig, TeacherMode};
use pgn::data::{load_image, raw_to_batch, save_png, ImageDataset, RawImage};
use pgn::fit::{dip_fit, FitConfig, GradientSource, LossMode};
use pgn::heads;
use pgn::networks::{build_backbone, BackboneSpec, PgnModel};
use pgn::perf::{self, CostReport, TrackingAllocator};
use pgn::teacher::{normalize, denormalize, Teacher, TeacherSpec};
use pgn::trainer::augment::resize_bilinear;
use pgn::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "pgn", about = "Perceptual gradient networks: train, evaluate, count")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Distill the teacher's gradient into a PGN.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the divergence/stagnation table over held-out images.
    Stability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Adds checkpoints on top of the config's list.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Fit a single image and write the trace and final reconstruction.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// mse_only | teacher_pl | pgn | pgn_plus_mse
        #[arg(long)]
        mode: Option<String>,
    },
    /// Render a constrained proxy target back to pixel space.
    DumpProxy {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The "generated" image.
        #[arg(long)]
        yhat: PathBuf,
        /// The ground-truth image.
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the parameter/MACs table for the teacher and all presets.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also measure wall time and peak memory.
        #[arg(long)]
        measure: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Checkpoint(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.trainer.seed = s;
        cfg.harness.fit.seed = s;
    }
    RunConfig::device_from_env()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, seed } => cmd_train(&config, out, seed),
        Cmd::Stability {
            config,
            out,
            seed,
            checkpoint,
        } => cmd_stability(&config, out, seed, checkpoint),
        Cmd::Fit {
            config,
            image,
            out,
            seed,
            checkpoint,
            mode,
        } => cmd_fit(&config, &image, out, seed, checkpoint, mode),
        Cmd::DumpProxy {
            checkpoint,
            yhat,
            y,
            out,
        } => cmd_dump_proxy(&checkpoint, &yhat, &y, &out),
        Cmd::Bench {
            config,
            out,
            measure,
        } => cmd_bench(config.as_deref(), out, measure),
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, out, seed)?;
    let teacher: Teacher<f32> = cfg.teacher.build()?;
    let dataset = ImageDataset::load_dir(&cfg.dataset.dir)?;
    let (train_pool, _holdout) = dataset.split(cfg.dataset.holdout);
    if train_pool.is_empty() {
        return Err(Error::Config("no training images after the holdout split".into()));
    }
    let mut tcfg = cfg.trainer.clone();
    tcfg.seed = cfg.seed;
    let outcome = pgn::trainer::train(
        &tcfg,
        &teacher,
        cfg.head.variant()?,
        cfg.backbone.spec(),
        train_pool,
        &cfg.out_dir,
    )?;
    println!(
        "trained {} steps ({} resets), final cosine {:.4}",
        outcome.steps, outcome.resets, outcome.final_cos_mean
    );
    println!("metrics:    {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

/// Center square crop, resize to `size`, normalize.
fn prepare_target<F: pgn::nn::Scalar>(
    raw: &RawImage,
    size: usize,
    teacher: &Teacher<F>,
) -> pgn::nn::Tensor<F> {
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let side = h.min(w);
    let oy = (h - side) / 2;
    let ox = (w - side) / 2;
    let crop = raw
        .slice(ndarray::s![.., oy..oy + side, ox..ox + side])
        .to_owned();
    let crop_f = crop.mapv(|v| F::from_f64c(v as f64));
    let resized = resize_bilinear(&crop_f, size, size);
    let batch = resized.insert_axis(ndarray::Axis(0));
    normalize(&batch.to_owned(), teacher.normalization())
}

fn cmd_stability(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    extra_checkpoints: Vec<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config, out, seed)?;
    let teacher: Teacher<f32> = cfg.teacher.build()?;
    let dataset = ImageDataset::load_dir(&cfg.dataset.dir)?;
    let (_, holdout) = dataset.split(cfg.dataset.holdout);
    let n = cfg.harness.num_images.min(holdout.len());
    if n == 0 {
        return Err(Error::Config("no holdout images for the stability run".into()));
    }
    let size = cfg.harness.generator.output_size();
    let targets: Vec<pgn::nn::Tensor<f32>> = holdout[..n]
        .iter()
        .map(|r| prepare_target(r, size, &teacher))
        .collect();

    let mut checkpoints = cfg.harness.checkpoints.clone();
    checkpoints.extend(extra_checkpoints);
    let mut models = Vec::new();
    for p in &checkpoints {
        models.push(PgnModel::<f32>::load(p)?);
    }
    let mut variants: Vec<(String, GradientSource<f32>)> = Vec::new();
    if cfg.harness.include_baselines {
        variants.push(("mse".into(), GradientSource::MseOnly));
        variants.push(("teacher_pl".into(), GradientSource::TeacherPl));
    }
    for m in &models {
        variants.push((
            format!("{}:{}", m.spec.label(), m.head.kind),
            GradientSource::Pgn(m),
        ));
    }
    if variants.is_empty() {
        return Err(Error::Config(
            "stability needs checkpoints or include_baselines".into(),
        ));
    }

    let mut fit_cfg = cfg.harness.fit.clone();
    fit_cfg.seed = cfg.seed;
    let (rows, results) =
        pgn::fit::stability_experiment(&targets, &variants, &cfg.harness.generator, &teacher, &fit_cfg)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let table = pgn::fit::format_stability_table(&rows);
    std::fs::write(cfg.out_dir.join("stability_report.txt"), &table)?;
    print!("{table}");

    let traces_dir = cfg.out_dir.join("traces");
    std::fs::create_dir_all(&traces_dir)?;
    let mut outcomes = String::from("variant,image,verdict,best_iter,best_pl,last_iter,last_pl\n");
    for (vi, (label, _)) in variants.iter().enumerate() {
        for (ti, r) in results[vi].iter().enumerate() {
            let mut t = String::from("iter,pl,mse\n");
            for (i, (pl, mse)) in r.trace.iter().zip(r.mse_trace.iter()).enumerate() {
                t.push_str(&format!("{i},{pl:.9e},{mse:.9e}\n"));
            }
            std::fs::write(traces_dir.join(format!("v{vi}_img{ti}.csv")), t)?;
            let o = &r.outcome;
            outcomes.push_str(&format!(
                "{},{},{},{},{:.9e},{},{}\n",
                label,
                ti,
                o.verdict,
                o.best_iter,
                o.best_pl,
                o.last_iter.map(|v| v.to_string()).unwrap_or_default(),
                o.last_pl.map(|v| format!("{v:.9e}")).unwrap_or_default(),
            ));
        }
    }
    std::fs::write(cfg.out_dir.join("outcomes.csv"), outcomes)?;
    Ok(())
}

fn cmd_fit(
    config: &Path,
    image: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    mode: Option<String>,
) -> Result<()> {
    let cfg = load_config(config, out, seed)?;
    let teacher: Teacher<f32> = cfg.teacher.build()?;
    let mut fit_cfg: FitConfig = cfg.harness.fit.clone();
    fit_cfg.seed = cfg.seed;
    if let Some(m) = mode {
        fit_cfg.loss_mode = match m.as_str() {
            "mse_only" => LossMode::MseOnly,
            "teacher_pl" => LossMode::TeacherPl,
            "pgn" => LossMode::Pgn,
            "pgn_plus_mse" => LossMode::PgnPlusMse,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss mode {other} (expected mse_only|teacher_pl|pgn|pgn_plus_mse)"
                )))
            }
        };
    }
    let ckpt_path = checkpoint.or_else(|| cfg.harness.checkpoints.first().cloned());
    let model = match fit_cfg.loss_mode {
        LossMode::Pgn | LossMode::PgnPlusMse => Some(PgnModel::<f32>::load(
            ckpt_path
                .as_deref()
                .ok_or_else(|| Error::Config("this loss mode needs --checkpoint".into()))?,
        )?),
        _ => None,
    };
    let source = GradientSource::from_mode(fit_cfg.loss_mode, model.as_ref(), fit_cfg.lambda_mse)?;

    let raw = load_image(image)?;
    let size = cfg.harness.generator.output_size();
    let target = prepare_target::<f32>(&raw, size, &teacher);
    let result = dip_fit(&target, &cfg.harness.generator, &source, &teacher, &fit_cfg)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut t = String::from("iter,pl,mse\n");
    for (i, (pl, mse)) in result.trace.iter().zip(result.mse_trace.iter()).enumerate() {
        t.push_str(&format!("{i},{pl:.9e},{mse:.9e}\n"));
    }
    std::fs::write(cfg.out_dir.join("trace.csv"), t)?;
    std::fs::write(
        cfg.out_dir.join("outcome.json"),
        serde_json::to_string_pretty(&result.outcome).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    save_png(
        &cfg.out_dir.join("final.png"),
        &denormalize(&result.final_image, teacher.normalization()),
    )?;
    save_png(
        &cfg.out_dir.join("target.png"),
        &denormalize(&target, teacher.normalization()),
    )?;
    println!(
        "{}: {} (best PL {:.4} at iter {})",
        source.label(),
        result.outcome.verdict,
        result.outcome.best_pl,
        result.outcome.best_iter
    );
    Ok(())
}

fn cmd_dump_proxy(checkpoint: &Path, yhat_path: &Path, y_path: &Path, out: &Path) -> Result<()> {
    let model = PgnModel::<f32>::load(checkpoint)?;
    if !model.head.has_proxy() {
        return Err(Error::Config(format!(
            "checkpoint {} uses the direct head, which produces no proxy target; \
             only proxy-based heads can be dumped",
            checkpoint.display()
        )));
    }
    let yhat_raw = load_image(yhat_path)?;
    let y_raw = load_image(y_path)?;
    if yhat_raw.shape() != y_raw.shape() {
        return Err(Error::Dimension(format!(
            "image sizes differ: {:?} vs {:?}",
            &yhat_raw.shape()[1..],
            &y_raw.shape()[1..]
        )));
    }
    let d = model.spec.spatial_divisor();
    let (h, w) = (yhat_raw.shape()[1], yhat_raw.shape()[2]);
    if h % d != 0 || w % d != 0 {
        return Err(Error::Dimension(format!(
            "image {h}x{w} not divisible by the backbone's {d}"
        )));
    }
    let yhat = normalize(&raw_to_batch::<f32>(&yhat_raw), &model.norm);
    let y = normalize(&raw_to_batch::<f32>(&y_raw), &model.norm);
    let (_, proxy) = model.synthesize(&yhat, &y)?;
    let proxy = proxy.expect("proxy head");
    // invert the constraint's normalization: raw = (P / beta) * std + mean
    let proxy_raw = heads::proxy_to_raw(&proxy, model.head.beta, &model.norm);

    std::fs::create_dir_all(out)?;
    save_png(&out.join("proxy.png"), &proxy_raw)?;
    save_png(&out.join("yhat.png"), &raw_to_batch::<f32>(&yhat_raw))?;
    save_png(&out.join("y.png"), &raw_to_batch::<f32>(&y_raw))?;
    println!("proxy dump written to {}", out.display());
    Ok(())
}

fn cmd_bench(config: Option<&Path>, out: Option<PathBuf>, measure: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p, out, None)?,
        None => {
            let mut c = RunConfig::default();
            if let Some(o) = out {
                c.out_dir = o;
            }
            c
        }
    };
    let res = cfg.perf.resolution;
    let batch = cfg.perf.batch;
    if batch == 0 {
        return Err(Error::Config("perf.batch must be positive".into()));
    }
    let mut reports: Vec<CostReport> = Vec::new();

    // teacher rows: gradient cost under the pair-forward x3 convention
    for (label, spec) in [
        ("VGG-19", TeacherSpec::vgg19()),
        ("tiny-teacher", TeacherSpec::tiny()),
    ] {
        reports.push(CostReport {
            label: label.into(),
            params: spec.param_count(),
            macs_forward: spec.forward_macs(res, res),
            macs_gradient: spec.pair_gradient_macs(res, res),
            wall_time_s: None,
            peak_memory_bytes: None,
        });
    }

    // backbone presets: a PGN gradient is one forward pass
    let mut presets = vec![
        BackboneSpec::resnet_exact(4),
        BackboneSpec::resnet_exact(6),
        BackboneSpec::resnet_exact(8),
        BackboneSpec::unet_exact(),
    ];
    presets.push(cfg.backbone.spec());
    for spec in presets {
        let net = build_backbone::<f32>(&spec, 0)?;
        let macs = perf::count_macs_backbone(net.as_ref(), &spec, res, res)?;
        reports.push(CostReport {
            label: spec.label(),
            params: perf::count_params(net.as_ref()),
            macs_forward: macs,
            macs_gradient: macs,
            wall_time_s: None,
            peak_memory_bytes: None,
        });
    }

    if measure || cfg.perf.measure {
        // measured pair: PGN forward vs teacher forward-backward, same batch
        let spec = BackboneSpec::resnet_exact(4);
        let net = build_backbone::<f32>(&spec, 0)?;
        let x = pgn::nn::Tensor::<f32>::zeros((batch, 6, res, res));
        let m = perf::measure(cfg.perf.repeats.max(5), 2, || net.forward(&x))?;
        reports.push(CostReport {
            label: format!("{} fwd@{res} (measured)", spec.label()),
            params: perf::count_params(net.as_ref()),
            macs_forward: perf::count_macs_backbone(net.as_ref(), &spec, res, res)?,
            macs_gradient: 0,
            wall_time_s: Some(m.median_wall_s),
            peak_memory_bytes: m.peak_bytes,
        });

        let teacher: Teacher<f32> = match cfg.teacher.mode {
            TeacherMode::Tiny => Teacher::build(TeacherSpec::tiny(), cfg.teacher.seed)?,
            TeacherMode::Vgg19 => cfg.teacher.build()?,
        };
        let yhat = pgn::nn::Tensor::<f32>::zeros((batch, 3, res, res));
        let y = pgn::nn::Tensor::<f32>::from_elem((batch, 3, res, res), 0.5);
        let m = perf::measure(cfg.perf.repeats.max(5), 2, || {
            teacher.loss_and_grad(&yhat, &y).unwrap()
        })?;
        reports.push(CostReport {
            label: format!("teacher grad@{res} (measured)"),
            params: teacher.param_count(),
            macs_forward: teacher.spec().forward_macs(res, res),
            macs_gradient: teacher.spec().pair_gradient_macs(res, res),
            wall_time_s: Some(m.median_wall_s),
            peak_memory_bytes: m.peak_bytes,
        });
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = String::from(CostReport::csv_header());
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(cfg.out_dir.join("bench.csv"), csv)?;
    print!("{}", perf::format_table(&reports));
    Ok(())
}
