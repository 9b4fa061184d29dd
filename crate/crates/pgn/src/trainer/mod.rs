//! The distillation pipeline.
//!
//! Each step, a batch of real images is split across `n` surrogate
//! autoencoders that reconstruct them; the reconstructions are concatenated
//! back into one batch, the teacher produces the real loss gradient, and the
//! PGN produces its synthetic one. The surrogates descend the *synthetic*
//! field (the PGN stays frozen for that update), then the PGN parameters are
//! updated by the meta-loss:
//!
//! ```text
//! L = lambda_grad * ||g_syn - g_real||^2
//!   + lambda_vgg  * PL(P, y)
//!   + lambda_l1   * ||P - y||_1        (proxy terms; skipped for `direct`)
//! ```
//!
//! with the real gradient treated as a constant. Surrogates whose
//! reconstruction loss plateaus for a full window of batches are
//! re-initialized from a fresh seed, keeping the distribution of `(yhat, y)`
//! pairs moving.

pub mod augment;
pub mod plateau;

use crate::data::RawImage;
use crate::fit::cosine_batch;
use crate::heads::{self, HeadKind, HeadVariant};
use crate::networks::{
    build_autoencoder, concat_pair, AutoencoderSpec, BackboneSpec, PgnModel,
};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::{zero_grads, Layer, Scalar, Tensor};
use crate::teacher::Teacher;
use crate::{Error, Result};
use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Once;

pub use augment::{hflip, Augmentor};
pub use plateau::PlateauTracker;

/// Coefficients of the meta-loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaLossWeights {
    pub grad: f64,
    pub vgg: f64,
    pub l1: f64,
}

impl Default for MetaLossWeights {
    fn default() -> Self {
        MetaLossWeights {
            grad: 1.0,
            vgg: 0.5,
            l1: 0.2,
        }
    }
}

/// Distillation run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_autoencoders: usize,
    pub image_size: usize,
    /// Total images per step; must be divisible by `n_autoencoders`.
    pub batch_size: usize,
    pub pgn_optimizer: AdamConfig,
    pub ae_optimizer: AdamConfig,
    pub meta_weights: MetaLossWeights,
    /// Batches without relative improvement before a surrogate resets.
    pub plateau_window: usize,
    pub plateau_epsilon: f64,
    pub total_steps: u64,
    pub seed: u64,
    /// Metrics row cadence (steps per row).
    pub metrics_every: u64,
    pub checkpoint_every: u64,
    pub ae_base_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_autoencoders: 3,
            image_size: 64,
            batch_size: 3,
            pgn_optimizer: AdamConfig::with_lr(1e-4),
            ae_optimizer: AdamConfig::with_lr(2e-4),
            meta_weights: MetaLossWeights::default(),
            plateau_window: 500,
            plateau_epsilon: 1e-3,
            total_steps: 20_000,
            seed: 0,
            metrics_every: 25,
            checkpoint_every: 2_000,
            ae_base_channels: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_autoencoders == 0
            || self.image_size == 0
            || self.batch_size == 0
            || self.total_steps == 0
            || self.metrics_every == 0
            || self.checkpoint_every == 0
            || self.ae_base_channels == 0
        {
            return Err(Error::Config("all trainer counts must be positive".into()));
        }
        if self.plateau_window < 1 {
            return Err(Error::Config("plateau_window must be >= 1".into()));
        }
        if !self.batch_size.is_multiple_of(self.n_autoencoders) {
            return Err(Error::Config(format!(
                "batch_size {} must be divisible by n_autoencoders {}",
                self.batch_size, self.n_autoencoders
            )));
        }
        Ok(())
    }
}

static DIRECT_META_WARN: Once = Once::new();

/// The meta-loss value, averaged over the batch.
///
/// `real_grad` is treated as a constant target. For the `direct` head (which
/// produces no proxy) the proxy terms are skipped with a one-time warning;
/// for proxy heads a missing proxy with nonzero proxy weights is a
/// configuration error.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss<F: Scalar>(
    yhat: &Tensor<F>,
    y: &Tensor<F>,
    pgn_output: &Tensor<F>,
    proxy: Option<&Tensor<F>>,
    real_grad: &Tensor<F>,
    weights: &MetaLossWeights,
    teacher: &Teacher<F>,
    head_kind: HeadKind,
) -> Result<F> {
    let terms = meta_loss_terms(
        yhat, y, pgn_output, proxy, real_grad, weights, teacher, head_kind,
    )?;
    Ok(terms.grad + terms.vgg + terms.l1)
}

/// Weighted values of the three meta-loss terms (batch means).
#[derive(Debug, Clone, Copy)]
pub struct MetaTerms<F> {
    pub grad: F,
    pub vgg: F,
    pub l1: F,
}

#[allow(clippy::too_many_arguments)]
fn meta_loss_terms<F: Scalar>(
    yhat: &Tensor<F>,
    y: &Tensor<F>,
    pgn_output: &Tensor<F>,
    proxy: Option<&Tensor<F>>,
    real_grad: &Tensor<F>,
    weights: &MetaLossWeights,
    teacher: &Teacher<F>,
    head_kind: HeadKind,
) -> Result<MetaTerms<F>> {
    if pgn_output.shape() != real_grad.shape() || pgn_output.shape() != yhat.shape() {
        return Err(Error::Dimension(format!(
            "meta_loss: output {:?}, real grad {:?}, yhat {:?}",
            pgn_output.shape(),
            real_grad.shape(),
            yhat.shape()
        )));
    }
    let b = F::from_f64c(yhat.shape()[0] as f64);
    let lg = F::from_f64c(weights.grad);
    let grad_term = {
        let mut acc = F::zero();
        ndarray::Zip::from(pgn_output).and(real_grad).for_each(|&g, &r| {
            let d = g - r;
            acc += d * d;
        });
        lg * acc / b
    };

    let (vgg_term, l1_term) = match proxy {
        Some(p) => {
            let pl = teacher.perceptual_loss(p, y)?;
            let vgg = F::from_f64c(weights.vgg) * pl.sum() / b;
            let mut l1 = F::zero();
            ndarray::Zip::from(p).and(y).for_each(|&pv, &yv| {
                l1 += (pv - yv).abs();
            });
            (vgg, F::from_f64c(weights.l1) * l1 / b)
        }
        None => {
            if weights.vgg != 0.0 || weights.l1 != 0.0 {
                if head_kind == HeadKind::Direct {
                    DIRECT_META_WARN.call_once(|| {
                        log::warn!(
                            "direct head produces no proxy; skipping the VGG/L1 meta-loss terms"
                        );
                    });
                } else {
                    return Err(Error::Config(
                        "proxy head provided no proxy target to the meta-loss".into(),
                    ));
                }
            }
            (F::zero(), F::zero())
        }
    };
    if head_kind == HeadKind::Direct && proxy.is_some() {
        return Err(Error::Config(
            "direct head cannot take a proxy target".into(),
        ));
    }
    Ok(MetaTerms {
        grad: grad_term,
        vgg: vgg_term,
        l1: l1_term,
    })
}

/// Meta-loss terms plus the gradient with respect to the backbone output,
/// ready to backpropagate into the PGN parameters.
///
/// The synthetic gradient and proxy are rebuilt from `backbone_out`, the
/// real gradient is treated as a constant, and all reductions are batch
/// means, matching [`meta_loss`].
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_grads<F: Scalar>(
    yhat: &Tensor<F>,
    y: &Tensor<F>,
    backbone_out: &Tensor<F>,
    variant: &HeadVariant,
    norm: &crate::teacher::Normalization,
    real_grad: &Tensor<F>,
    weights: &MetaLossWeights,
    teacher: &Teacher<F>,
) -> Result<(MetaTerms<F>, Tensor<F>)> {
    let (g_syn, proxy) = heads::synthesize(yhat, y, backbone_out, variant, norm)?;
    let b = F::from_f64c(yhat.shape()[0] as f64);
    let w = *weights;

    let mut d_grad = &g_syn - real_grad;
    let grad_term = {
        let mut acc = F::zero();
        for v in d_grad.iter() {
            acc += *v * *v;
        }
        F::from_f64c(w.grad) * acc / b
    };
    d_grad.mapv_inplace(|v| v * F::from_f64c(2.0 * w.grad) / b);

    let (d_proxy, vgg_term, l1_term) = match &proxy {
        Some(p) => {
            let (ppl, pgrad) = teacher.loss_and_grad(p, y)?;
            let vgg_term = F::from_f64c(w.vgg) * ppl.sum() / b;
            let mut l1 = F::zero();
            let mut dp = pgrad.mapv(|v| v * F::from_f64c(w.vgg) / b);
            ndarray::Zip::from(&mut dp).and(p).and(y).for_each(|d, &pv, &yv| {
                let diff = pv - yv;
                l1 += diff.abs();
                let sign = if diff > F::zero() {
                    F::one()
                } else if diff < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                *d += F::from_f64c(w.l1) * sign / b;
            });
            (Some(dp), vgg_term, F::from_f64c(w.l1) * l1 / b)
        }
        None => {
            if (w.vgg != 0.0 || w.l1 != 0.0) && variant.kind == HeadKind::Direct {
                DIRECT_META_WARN.call_once(|| {
                    log::warn!(
                        "direct head produces no proxy; skipping the VGG/L1 meta-loss terms"
                    );
                });
            }
            (None, F::zero(), F::zero())
        }
    };

    let d_backbone = heads::backbone_grad(&d_grad, d_proxy.as_ref(), yhat, backbone_out, variant, norm)?;
    Ok((
        MetaTerms {
            grad: grad_term,
            vgg: vgg_term,
            l1: l1_term,
        },
        d_backbone,
    ))
}

/// One surrogate update: reconstruct `y`, obtain the image-space field from
/// `grad_fn(yhat)`, inject it as the loss gradient (divided by the batch
/// size, matching a batch-mean loss) and apply one optimizer step.
///
/// A non-finite field aborts the update: parameters stay untouched and the
/// caller is told via `finite = false` so it can count the event.
pub struct SurrogateStepInfo<F: Scalar> {
    pub yhat: Tensor<F>,
    pub finite: bool,
}

pub fn surrogate_step<F: Scalar>(
    net: &mut dyn Layer<F>,
    opt: &mut Adam<F>,
    y: &Tensor<F>,
    grad_fn: impl FnOnce(&Tensor<F>) -> Result<Tensor<F>>,
) -> Result<SurrogateStepInfo<F>> {
    let yhat = net.forward_t(y);
    let field = grad_fn(&yhat)?;
    if field.shape() != yhat.shape() {
        return Err(Error::Dimension(format!(
            "surrogate_step: field {:?} vs reconstruction {:?}",
            field.shape(),
            yhat.shape()
        )));
    }
    if !field.iter().all(|v| v.is_finite()) {
        log::warn!("non-finite synthetic gradient; surrogate update skipped");
        return Ok(SurrogateStepInfo { yhat, finite: false });
    }
    let m = F::from_f64c(y.shape()[0] as f64);
    let injected = field.mapv(|v| v / m);
    zero_grads(net);
    net.backward(&injected);
    opt.step(net);
    Ok(SurrogateStepInfo { yhat, finite: true })
}

struct SurrogateSlot<F: Scalar> {
    net: Box<dyn Layer<F>>,
    opt: Adam<F>,
    tracker: PlateauTracker,
    spec: AutoencoderSpec,
    reset_count: u64,
    seed: u64,
}

/// Metrics produced by one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub meta_grad: f64,
    pub meta_vgg: f64,
    pub meta_l1: f64,
    pub meta_total: f64,
    pub cos_mean: f64,
    pub cos_std: f64,
    /// Cumulative surrogate resets since the start of the run.
    pub resets: u64,
    /// Mean reconstruction loss over the batch.
    pub recon_pl: f64,
}

/// Owns the PGN, the surrogate pool and all optimizer state.
pub struct Trainer<'t, F: Scalar> {
    pub cfg: TrainConfig,
    pub model: PgnModel<F>,
    teacher: &'t Teacher<F>,
    pgn_opt: Adam<F>,
    slots: Vec<SurrogateSlot<F>>,
    step: u64,
    resets: u64,
    pub nonfinite_fields: u64,
}

impl<'t, F: Scalar> Trainer<'t, F> {
    pub fn new(
        cfg: TrainConfig,
        teacher: &'t Teacher<F>,
        variant: HeadVariant,
        backbone_spec: BackboneSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        let d = backbone_spec.spatial_divisor();
        if !cfg.image_size.is_multiple_of(d) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by the backbone's {d}",
                cfg.image_size
            )));
        }
        let model = PgnModel::new(
            backbone_spec,
            variant,
            *teacher.normalization(),
            cfg.seed,
        )?;
        let presets = AutoencoderSpec::desk_presets(cfg.ae_base_channels);
        let mut slots = Vec::with_capacity(cfg.n_autoencoders);
        for i in 0..cfg.n_autoencoders {
            let spec = presets[i % presets.len()];
            let seed = cfg.seed.wrapping_add(1000 + i as u64);
            slots.push(SurrogateSlot {
                net: build_autoencoder::<F>(&spec, seed)?,
                opt: Adam::new(cfg.ae_optimizer),
                tracker: PlateauTracker::new(cfg.plateau_window, cfg.plateau_epsilon),
                spec,
                reset_count: 0,
                seed,
            });
        }
        let pgn_opt = Adam::new(cfg.pgn_optimizer);
        Ok(Trainer {
            cfg,
            model,
            teacher,
            pgn_opt,
            slots,
            step: 0,
            resets: 0,
            nonfinite_fields: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Checks one surrogate's plateau state; on a plateau, re-draws its
    /// parameters from a fresh seed, drops its optimizer state and clears
    /// the tracker.
    pub fn maybe_reset(&mut self, slot_idx: usize) -> bool {
        let slot = &mut self.slots[slot_idx];
        if !slot.tracker.plateaued() {
            return false;
        }
        slot.reset_count += 1;
        let fresh = slot
            .seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(slot.reset_count);
        let mut rng = ChaCha8Rng::seed_from_u64(fresh);
        slot.net.reinit(&mut rng);
        slot.opt.reset();
        slot.tracker.clear();
        self.resets += 1;
        log::info!(
            "surrogate {slot_idx} reset (count {}, depth {})",
            slot.reset_count,
            slot.spec.depth
        );
        true
    }

    /// Runs one full training step on an already-normalized batch
    /// `(batch_size, 3, H, W)`.
    pub fn step_with(&mut self, y: &Tensor<F>) -> Result<StepMetrics> {
        let n = self.cfg.n_autoencoders;
        let m = self.cfg.batch_size / n;
        if y.shape()[0] != self.cfg.batch_size {
            return Err(Error::Dimension(format!(
                "step_with: batch {} vs configured {}",
                y.shape()[0],
                self.cfg.batch_size
            )));
        }
        self.step += 1;

        // 1. reconstructions (training-mode forward: caches kept for the
        //    surrogate updates below)
        let mut yhat = Array4::zeros(y.raw_dim());
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let sub = y.slice(s![i * m..(i + 1) * m, .., .., ..]).to_owned();
            let rec = slot.net.forward_t(&sub);
            yhat.slice_mut(s![i * m..(i + 1) * m, .., .., ..]).assign(&rec);
        }

        // 2. the real gradient, computed once and reused for the meta target
        //    and the cosine metric
        let (pl, real_grad) = self.teacher.loss_and_grad(&yhat, y)?;

        // 3. synthetic gradient (training-mode backbone forward for the
        //    meta update later)
        let input = concat_pair(&yhat, y)?;
        let backbone_out = self.model.backbone.forward_t(&input);
        let (g_syn, _proxy) =
            heads::synthesize(&yhat, y, &backbone_out, &self.model.head, &self.model.norm)?;

        // 4. surrogate updates in the synthetic field (theta frozen)
        let mf = F::from_f64c(m as f64);
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let field = g_syn.slice(s![i * m..(i + 1) * m, .., .., ..]);
            if !field.iter().all(|v| v.is_finite()) {
                self.nonfinite_fields += 1;
                log::warn!(
                    "step {}: non-finite synthetic gradient for surrogate {i}; update skipped",
                    self.step
                );
                continue;
            }
            let injected = field.mapv(|v| v / mf);
            zero_grads(slot.net.as_mut());
            slot.net.backward(&injected);
            slot.opt.step(slot.net.as_mut());
            let slot_pl: f64 = pl
                .slice(s![i * m..(i + 1) * m])
                .iter()
                .map(|v| v.to_f64().unwrap())
                .sum::<f64>()
                / m as f64;
            slot.tracker.record(slot_pl);
        }

        // 5. meta update of the PGN (phi frozen)
        let (terms, d_backbone) = meta_loss_grads(
            &yhat,
            y,
            &backbone_out,
            &self.model.head,
            &self.model.norm,
            &real_grad,
            &self.cfg.meta_weights,
            self.teacher,
        )?;
        let (grad_term, vgg_term, l1_term) = (terms.grad, terms.vgg, terms.l1);
        let total = grad_term + vgg_term + l1_term;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "meta-loss at step {}: grad {grad_term}, vgg {vgg_term}, l1 {l1_term}",
                self.step
            )));
        }
        zero_grads(self.model.backbone.as_mut());
        self.model.backbone.backward(&d_backbone);
        self.pgn_opt.step(self.model.backbone.as_mut());
        self.model.step = self.step;

        // 6. plateau-triggered resets
        for i in 0..n {
            self.maybe_reset(i);
        }

        let cos = cosine_batch(&g_syn, &real_grad);
        let (cos_mean, cos_std) = mean_std(&cos);
        Ok(StepMetrics {
            step: self.step,
            meta_grad: grad_term.to_f64().unwrap(),
            meta_vgg: vgg_term.to_f64().unwrap(),
            meta_l1: l1_term.to_f64().unwrap(),
            meta_total: total.to_f64().unwrap(),
            cos_mean,
            cos_std,
            resets: self.resets,
            recon_pl: pl.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / pl.len() as f64,
        })
    }
}

fn mean_std(vals: &[Option<f64>]) -> (f64, f64) {
    let present: Vec<f64> = vals.iter().flatten().copied().collect();
    if present.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / present.len() as f64;
    (mean, var.sqrt())
}

pub const METRICS_HEADER: &str =
    "step,meta_grad,meta_vgg,meta_l1,meta_total,cos_mean,cos_std,resets";

fn metrics_row(m: &StepMetrics) -> String {
    format!(
        "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
        m.step, m.meta_grad, m.meta_vgg, m.meta_l1, m.meta_total, m.cos_mean, m.cos_std, m.resets
    )
}

/// Result of a [`train`] run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub resets: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_cos_mean: f64,
}

/// Drives the full pipeline: samples and augments batches from `dataset`,
/// steps the trainer, appends metrics rows every `metrics_every` steps and
/// writes checkpoints. A non-finite meta-loss aborts the run with a
/// diagnostic dump next to the metrics file.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    teacher: &Teacher<F>,
    variant: HeadVariant,
    backbone_spec: BackboneSpec,
    dataset: &[RawImage],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(cfg.clone(), teacher, variant, backbone_spec)?;
    let augmentor = Augmentor::new(cfg.image_size, *teacher.normalization());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xA0C0));

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;

    let checkpoint_path = out_dir.join("pgn_final.ckpt");
    let mut last_cos = f64::NAN;
    for step in 1..=cfg.total_steps {
        let batch = sample_batch::<F>(dataset, cfg.batch_size, &augmentor, &mut rng)?;
        let m = match trainer.step_with(&batch) {
            Ok(m) => m,
            Err(e) => {
                let dump = out_dir.join("abort_dump.json");
                let _ = std::fs::write(
                    &dump,
                    serde_json::json!({
                        "step": step,
                        "error": e.to_string(),
                        "resets": trainer.resets(),
                        "nonfinite_fields": trainer.nonfinite_fields,
                    })
                    .to_string(),
                );
                log::error!("run aborted at step {step}: {e}; diagnostics in {}", dump.display());
                return Err(e);
            }
        };
        last_cos = m.cos_mean;
        if (step - 1) % cfg.metrics_every == 0 {
            writeln!(metrics, "{}", metrics_row(&m))?;
        }
        if step % cfg.checkpoint_every == 0 {
            trainer
                .model
                .save(&out_dir.join(format!("pgn_step{step}.ckpt")))?;
        }
    }
    metrics.flush()?;
    trainer.model.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        steps: trainer.step_count(),
        resets: trainer.resets(),
        metrics_path,
        checkpoint_path,
        final_cos_mean: last_cos,
    })
}

/// Samples `batch` images (with replacement) and augments them into a
/// normalized batch tensor. Undersized images are skipped with a warning.
pub fn sample_batch<F: Scalar>(
    dataset: &[RawImage],
    batch: usize,
    augmentor: &Augmentor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let size = augmentor.size;
    let mut out = Array4::zeros((batch, 3, size, size));
    let mut filled = 0;
    let mut attempts = 0;
    while filled < batch {
        attempts += 1;
        if attempts > batch * 100 {
            return Err(Error::Config(
                "dataset holds no images large enough to augment".into(),
            ));
        }
        let idx = rng.gen_range(0..dataset.len());
        if let Some(img) = augmentor.augment::<F>(&dataset[idx], rng) {
            out.index_axis_mut(Axis(0), filled).assign(&img);
            filled += 1;
        }
    }
    Ok(out)
}
