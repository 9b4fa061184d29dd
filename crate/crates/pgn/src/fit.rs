//! Single-image fitting driven by synthetic gradients.
//!
//! A small decoder is trained to reproduce one target image, with the
//! image-space gradient supplied by one of four sources: the plain MSE
//! gradient, the teacher's real loss gradient, a PGN's synthetic gradient,
//! or the synthetic gradient combined with a scaled MSE term. The true
//! teacher loss is recorded at every iteration regardless of the source, and
//! each run is classified as diverged, stagnated or successful.

use crate::networks::{build_dip_generator, DipGeneratorSpec, PgnModel};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::{zero_grads, Scalar, Tensor};
use crate::teacher::Teacher;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Which field drives the generator updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    MseOnly,
    TeacherPl,
    Pgn,
    PgnPlusMse,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossMode::MseOnly => "mse_only",
            LossMode::TeacherPl => "teacher_pl",
            LossMode::Pgn => "pgn",
            LossMode::PgnPlusMse => "pgn_plus_mse",
        };
        f.write_str(s)
    }
}

/// Fitting-run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub total_iters: usize,
    pub step_size: f64,
    pub loss_mode: LossMode,
    /// MSE coefficient in `pgn_plus_mse` mode.
    pub lambda_mse: f64,
    /// A run diverges when its loss reaches this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Iterations without strict improvement before a run stagnates.
    pub stagnation_patience: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            total_iters: 10_000,
            step_size: 0.01,
            loss_mode: LossMode::Pgn,
            lambda_mse: 20.0,
            divergence_factor: 2.0,
            stagnation_patience: 2_000,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        if self.divergence_factor <= 1.0 {
            return Err(Error::Config(format!(
                "divergence_factor must be > 1, got {}",
                self.divergence_factor
            )));
        }
        if self.stagnation_patience == 0 {
            return Err(Error::Config("stagnation_patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Diverged,
    Stagnated,
    Successful,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::Diverged => "diverged",
            Verdict::Stagnated => "stagnated",
            Verdict::Successful => "successful",
        };
        f.write_str(s)
    }
}

/// Per-run classification with the best (and, for diverged runs, last)
/// loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutcome {
    pub verdict: Verdict,
    pub best_iter: usize,
    pub best_pl: f64,
    pub last_iter: Option<usize>,
    pub last_pl: Option<f64>,
}

/// Classifies a recorded loss trace.
///
/// Walking the trace in order: divergence (`pl >= factor * initial`) is
/// checked before stagnation at each index; stagnation fires after
/// `patience` consecutive iterations without strict improvement of the
/// running best; otherwise the run is successful. `best_iter`/`best_pl`
/// always cover the prefix actually executed.
pub fn classify_trace(
    trace: &[f64],
    initial_pl: f64,
    factor: f64,
    patience: usize,
) -> StabilityOutcome {
    assert!(!trace.is_empty(), "classify_trace: empty trace");
    let mut best = f64::INFINITY;
    let mut best_iter = 0usize;
    let mut since_best = 0usize;
    for (i, &pl) in trace.iter().enumerate() {
        if pl < best {
            best = pl;
            best_iter = i;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if !pl.is_finite() || pl >= factor * initial_pl {
            return StabilityOutcome {
                verdict: Verdict::Diverged,
                best_iter,
                best_pl: best,
                last_iter: Some(i),
                last_pl: Some(pl),
            };
        }
        if since_best >= patience {
            return StabilityOutcome {
                verdict: Verdict::Stagnated,
                best_iter,
                best_pl: best,
                last_iter: None,
                last_pl: None,
            };
        }
    }
    StabilityOutcome {
        verdict: Verdict::Successful,
        best_iter,
        best_pl: best,
        last_iter: None,
        last_pl: None,
    }
}

/// The gradient source driving a fit. `Pgn` is executed as `PgnPlusMse`
/// with a zero coefficient, so the two are bit-identical when
/// `lambda_mse = 0`.
pub enum GradientSource<'a, F: Scalar> {
    MseOnly,
    TeacherPl,
    Pgn(&'a PgnModel<F>),
    PgnPlusMse(&'a PgnModel<F>, f64),
}

impl<'a, F: Scalar> GradientSource<'a, F> {
    pub fn from_mode(
        mode: LossMode,
        model: Option<&'a PgnModel<F>>,
        lambda_mse: f64,
    ) -> Result<Self> {
        Ok(match mode {
            LossMode::MseOnly => GradientSource::MseOnly,
            LossMode::TeacherPl => GradientSource::TeacherPl,
            LossMode::Pgn => GradientSource::Pgn(model.ok_or_else(|| {
                Error::Config("pgn loss mode needs a checkpoint".into())
            })?),
            LossMode::PgnPlusMse => GradientSource::PgnPlusMse(
                model.ok_or_else(|| Error::Config("pgn_plus_mse loss mode needs a checkpoint".into()))?,
                lambda_mse,
            ),
        })
    }

    pub fn label(&self) -> String {
        match self {
            GradientSource::MseOnly => "mse".into(),
            GradientSource::TeacherPl => "teacher_pl".into(),
            GradientSource::Pgn(m) => format!("pgn:{}:{}", m.spec.label(), m.head.kind),
            GradientSource::PgnPlusMse(m, l) => {
                format!("pgn+{l}mse:{}:{}", m.spec.label(), m.head.kind)
            }
        }
    }
}

/// Result of one fitting run.
pub struct FitResult<F: Scalar> {
    pub final_image: Tensor<F>,
    /// True teacher loss at every executed iteration.
    pub trace: Vec<f64>,
    /// Mean-squared error (normalized space) at every executed iteration.
    pub mse_trace: Vec<f64>,
    pub outcome: StabilityOutcome,
}

/// Mean-MSE gradient in normalized space: `2 * (x - y) / (C*H*W)`.
fn mse_grad<F: Scalar>(x: &Tensor<F>, y: &Tensor<F>) -> Tensor<F> {
    let n = x.len() / x.shape()[0];
    let scale = F::from_f64c(2.0 / n as f64);
    let mut g = x - y;
    g.mapv_inplace(|v| v * scale);
    g
}

fn mse_value<F: Scalar>(x: &Tensor<F>, y: &Tensor<F>) -> f64 {
    let n = x.len();
    let mut acc = 0.0f64;
    ndarray::Zip::from(x).and(y).for_each(|&a, &b| {
        let d = (a - b).to_f64().unwrap();
        acc += d * d;
    });
    acc / n as f64
}

/// Fits a generator to one normalized target image `(1, 3, H, W)`.
///
/// Every iteration the image-space field (per `source`) is backpropagated
/// into the generator and one Adam step applied; the run terminates early
/// per [`classify_trace`] semantics, which the returned outcome reproduces
/// exactly.
pub fn dip_fit<F: Scalar>(
    target: &Tensor<F>,
    gen_spec: &DipGeneratorSpec,
    source: &GradientSource<F>,
    teacher: &Teacher<F>,
    cfg: &FitConfig,
) -> Result<FitResult<F>> {
    cfg.validate()?;
    if target.shape()[0] != 1 {
        return Err(Error::Dimension(format!(
            "dip_fit expects a single-image batch, got {}",
            target.shape()[0]
        )));
    }
    if gen_spec.output_size() != target.shape()[2] || gen_spec.output_size() != target.shape()[3] {
        return Err(Error::Dimension(format!(
            "generator produces {0}x{0}, target is {1}x{2}",
            gen_spec.output_size(),
            target.shape()[2],
            target.shape()[3]
        )));
    }
    // `pgn` mode is the `pgn_plus_mse` path with a zero coefficient
    let source = match source {
        GradientSource::Pgn(m) => GradientSource::PgnPlusMse(m, 0.0),
        GradientSource::MseOnly => GradientSource::MseOnly,
        GradientSource::TeacherPl => GradientSource::TeacherPl,
        GradientSource::PgnPlusMse(m, l) => GradientSource::PgnPlusMse(m, *l),
    };

    let noise = gen_spec.make_noise::<F>(cfg.seed ^ 0x5EED_0F17);
    let mut gen = build_dip_generator::<F>(gen_spec, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.step_size));

    let mut trace: Vec<f64> = Vec::with_capacity(cfg.total_iters);
    let mut mse_trace: Vec<f64> = Vec::with_capacity(cfg.total_iters);
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut final_image: Option<Tensor<F>> = None;

    for _t in 0..cfg.total_iters {
        let x = gen.forward_t(&noise);
        let finite = x.iter().all(|v| v.is_finite());

        // the recorded loss is always the true teacher loss
        let (pl, real_grad) = if finite {
            match source {
                GradientSource::TeacherPl => {
                    let (l, g) = teacher.loss_and_grad(&x, target)?;
                    (l[0].to_f64().unwrap(), Some(g))
                }
                _ => (
                    teacher.perceptual_loss(&x, target)?[0].to_f64().unwrap(),
                    None,
                ),
            }
        } else {
            (f64::INFINITY, None)
        };
        trace.push(pl);
        mse_trace.push(if finite {
            mse_value(&x, target)
        } else {
            f64::INFINITY
        });
        final_image = Some(x.clone());

        // divergence before stagnation, both per classify_trace
        if pl < best {
            best = pl;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if !pl.is_finite() || pl >= cfg.divergence_factor * trace[0] {
            break;
        }
        if since_best >= cfg.stagnation_patience {
            break;
        }

        let field = match source {
            GradientSource::MseOnly => mse_grad(&x, target),
            GradientSource::TeacherPl => real_grad.expect("computed above"),
            GradientSource::PgnPlusMse(model, lambda) => {
                let (mut g, _) = model.synthesize(&x, target)?;
                if lambda != 0.0 {
                    let mut m = mse_grad(&x, target);
                    m.mapv_inplace(|v| v * F::from_f64c(lambda));
                    g += &m;
                }
                g
            }
            GradientSource::Pgn(_) => unreachable!("rewritten above"),
        };
        zero_grads(gen.as_mut());
        gen.backward(&field);
        opt.step(gen.as_mut());
    }

    let outcome = classify_trace(
        &trace,
        trace[0],
        cfg.divergence_factor,
        cfg.stagnation_patience,
    );
    Ok(FitResult {
        final_image: final_image.expect("at least one iteration"),
        trace,
        mse_trace,
        outcome,
    })
}

/// Cosine similarity between two fields of one image; `None` when either
/// field is identically zero.
pub fn cosine_similarity<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Option<f64> {
    assert_eq!(a.shape(), b.shape(), "cosine_similarity: shape mismatch");
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
        dot += x * y;
        na += x * x;
        nb += y * y;
    });
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// Per-image cosine similarities across a batch.
pub fn cosine_batch<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Vec<Option<f64>> {
    assert_eq!(a.shape(), b.shape(), "cosine_batch: shape mismatch");
    (0..a.shape()[0])
        .map(|i| {
            let ai = a.index_axis(ndarray::Axis(0), i).insert_axis(ndarray::Axis(0));
            let bi = b.index_axis(ndarray::Axis(0), i).insert_axis(ndarray::Axis(0));
            cosine_similarity(&ai.to_owned(), &bi.to_owned())
        })
        .collect()
}

/// Aggregates of one verdict class in a stability table.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct VerdictStats {
    pub count: usize,
    pub mean_best_iter: f64,
    pub mean_best_pl: f64,
    pub mean_last_iter: f64,
    pub mean_last_pl: f64,
}

/// One row of the stability table.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    pub label: String,
    pub diverged: VerdictStats,
    pub stagnated: VerdictStats,
    pub successful: VerdictStats,
}

impl StabilityRow {
    pub fn total(&self) -> usize {
        self.diverged.count + self.stagnated.count + self.successful.count
    }
}

/// Builds one table row from per-run outcomes.
pub fn aggregate_outcomes(label: &str, outcomes: &[StabilityOutcome]) -> StabilityRow {
    let mut groups: [Vec<&StabilityOutcome>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for o in outcomes {
        let g = match o.verdict {
            Verdict::Diverged => 0,
            Verdict::Stagnated => 1,
            Verdict::Successful => 2,
        };
        groups[g].push(o);
    }
    let stats = |v: &Vec<&StabilityOutcome>| -> VerdictStats {
        if v.is_empty() {
            return VerdictStats::default();
        }
        let n = v.len() as f64;
        VerdictStats {
            count: v.len(),
            mean_best_iter: v.iter().map(|o| o.best_iter as f64).sum::<f64>() / n,
            mean_best_pl: v.iter().map(|o| o.best_pl).sum::<f64>() / n,
            mean_last_iter: v
                .iter()
                .filter_map(|o| o.last_iter.map(|i| i as f64))
                .sum::<f64>()
                / n,
            mean_last_pl: v.iter().filter_map(|o| o.last_pl).sum::<f64>() / n,
        }
    };
    StabilityRow {
        label: label.to_string(),
        diverged: stats(&groups[0]),
        stagnated: stats(&groups[1]),
        successful: stats(&groups[2]),
    }
}

/// Runs every variant over every target (fits of one variant run in
/// parallel; each fit is internally sequential) and aggregates the verdicts.
/// Also returns the raw outcomes and traces in `(variant, target)` order.
#[allow(clippy::type_complexity)]
pub fn stability_experiment<F: Scalar>(
    targets: &[Tensor<F>],
    variants: &[(String, GradientSource<F>)],
    gen_spec: &DipGeneratorSpec,
    teacher: &Teacher<F>,
    cfg: &FitConfig,
) -> Result<(Vec<StabilityRow>, Vec<Vec<FitResult<F>>>)> {
    if targets.is_empty() {
        return Err(Error::Config("stability experiment needs targets".into()));
    }
    let mut rows = Vec::new();
    let mut all_results = Vec::new();
    for (label, source) in variants {
        let results: Result<Vec<FitResult<F>>> = targets
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut run_cfg = cfg.clone();
                run_cfg.seed = cfg.seed.wrapping_add(i as u64);
                dip_fit(t, gen_spec, source, teacher, &run_cfg)
            })
            .collect();
        let results = results?;
        let outcomes: Vec<StabilityOutcome> = results.iter().map(|r| r.outcome).collect();
        rows.push(aggregate_outcomes(label, &outcomes));
        all_results.push(results);
    }
    Ok((rows, all_results))
}

/// Text rendering of the stability table.
pub fn format_stability_table(rows: &[StabilityRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<26} | {:>4} {:>9} {:>9} {:>9} {:>9} | {:>4} {:>9} {:>9} | {:>4} {:>9} {:>9}\n",
        "", "div", "last_it", "last_pl", "best_it", "best_pl", "stag", "best_it", "best_pl",
        "succ", "best_it", "best_pl"
    ));
    for r in rows {
        let na = |c: usize, v: f64| {
            if c == 0 {
                "n/a".to_string()
            } else {
                format!("{v:.2}")
            }
        };
        s.push_str(&format!(
            "{:<26} | {:>4} {:>9} {:>9} {:>9} {:>9} | {:>4} {:>9} {:>9} | {:>4} {:>9} {:>9}\n",
            r.label,
            r.diverged.count,
            na(r.diverged.count, r.diverged.mean_last_iter),
            na(r.diverged.count, r.diverged.mean_last_pl),
            na(r.diverged.count, r.diverged.mean_best_iter),
            na(r.diverged.count, r.diverged.mean_best_pl),
            r.stagnated.count,
            na(r.stagnated.count, r.stagnated.mean_best_iter),
            na(r.stagnated.count, r.stagnated.mean_best_pl),
            r.successful.count,
            na(r.successful.count, r.successful.mean_best_iter),
            na(r.successful.count, r.successful.mean_best_pl),
        ));
    }
    s
}
