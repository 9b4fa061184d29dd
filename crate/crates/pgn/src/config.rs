//! Run configuration: one TOML file with a section per subsystem.
//!
//! Every field has a default, so an empty file is a valid desk-scale
//! configuration; unknown keys are rejected.

use crate::fit::{FitConfig, LossMode};
use crate::heads::{HeadKind, HeadVariant};
use crate::networks::{BackboneFamily, BackboneSpec, DipGeneratorSpec, Fidelity};
use crate::teacher::{Teacher, TeacherSpec};
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; sections without their own seed derive from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub teacher: TeacherSection,
    pub backbone: BackboneSection,
    pub head: HeadSection,
    pub trainer: TrainConfig,
    pub harness: HarnessSection,
    pub perf: PerfSection,
    pub dataset: DatasetSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            teacher: TeacherSection::default(),
            backbone: BackboneSection::default(),
            head: HeadSection::default(),
            trainer: TrainConfig::default(),
            harness: HarnessSection::default(),
            perf: PerfSection::default(),
            dataset: DatasetSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    Tiny,
    Vgg19,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub mode: TeacherMode,
    pub seed: u64,
    /// Optional raw-tensor weight file for `vgg19` mode.
    pub weights_file: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            mode: TeacherMode::Tiny,
            seed: 77,
            weights_file: None,
        }
    }
}

impl TeacherSection {
    pub fn spec(&self) -> TeacherSpec {
        match self.mode {
            TeacherMode::Tiny => TeacherSpec::tiny(),
            TeacherMode::Vgg19 => TeacherSpec::vgg19(),
        }
    }

    /// Builds the teacher; `vgg19` without a weight file gets seeded weights
    /// (costs and structure stay exact, loss values are meaningless).
    pub fn build<F: crate::nn::Scalar>(&self) -> Result<Teacher<F>> {
        let spec = self.spec();
        match (&self.weights_file, self.mode) {
            (Some(path), _) => Teacher::load_weights(spec, path),
            (None, TeacherMode::Vgg19) => {
                log::warn!(
                    "vgg19 teacher built with seeded weights (no weights_file configured)"
                );
                Teacher::build(spec, self.seed)
            }
            (None, TeacherMode::Tiny) => Teacher::build(spec, self.seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub family: BackboneFamily,
    pub fidelity: Fidelity,
    pub num_blocks: usize,
    pub num_scales: usize,
    pub base_channels: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            family: BackboneFamily::Resnet,
            fidelity: Fidelity::Desk,
            num_blocks: 4,
            num_scales: 5,
            base_channels: 16,
        }
    }
}

impl BackboneSection {
    pub fn spec(&self) -> BackboneSpec {
        BackboneSpec {
            family: self.family,
            num_blocks: self.num_blocks,
            num_scales: self.num_scales,
            base_channels: self.base_channels,
            fidelity: self.fidelity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub kind: HeadKind,
    /// Overrides of the per-kind defaults.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            kind: HeadKind::ConstrainedProxy,
            alpha: None,
            beta: None,
            gamma: None,
        }
    }
}

impl HeadSection {
    pub fn variant(&self) -> Result<HeadVariant> {
        let mut v = HeadVariant::with_kind(self.kind);
        if let Some(a) = self.alpha {
            v.alpha = a;
        }
        if let Some(b) = self.beta {
            v.beta = b;
        }
        if let Some(g) = self.gamma {
            v.gamma = g;
        }
        v.validate()?;
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    pub fit: FitConfig,
    pub generator: DipGeneratorSpec,
    /// Targets drawn from the dataset's holdout split.
    pub num_images: usize,
    /// PGN checkpoints to evaluate (stability/fit/dump-proxy commands).
    pub checkpoints: Vec<PathBuf>,
    /// Also run the `mse_only` and `teacher_pl` reference rows.
    pub include_baselines: bool,
}

impl Default for HarnessSection {
    fn default() -> Self {
        HarnessSection {
            fit: FitConfig {
                total_iters: 2_000,
                loss_mode: LossMode::Pgn,
                ..FitConfig::default()
            },
            generator: DipGeneratorSpec::default(),
            num_images: 20,
            checkpoints: Vec::new(),
            include_baselines: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfSection {
    /// Input resolution for MACs accounting.
    pub resolution: usize,
    pub batch: usize,
    /// Timing repeats (median reported); 0 disables measurement.
    pub repeats: usize,
    pub measure: bool,
}

impl Default for PerfSection {
    fn default() -> Self {
        PerfSection {
            resolution: 224,
            batch: 1,
            repeats: 7,
            measure: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub dir: PathBuf,
    /// Number of trailing images (by filename order) reserved for
    /// evaluation.
    pub holdout: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dir: PathBuf::from("assets/dataset"),
            holdout: 32,
        }
    }
}

impl RunConfig {
    /// Parses a TOML config file; parse errors carry line/column positions.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The device this build supports; anything but `cpu` in `PGN_DEVICE`
    /// is rejected.
    pub fn device_from_env() -> Result<String> {
        match std::env::var("PGN_DEVICE") {
            Ok(d) if d == "cpu" || d.is_empty() => Ok("cpu".into()),
            Ok(d) => Err(Error::Config(format!(
                "PGN_DEVICE={d} is not supported by this build (only cpu)"
            ))),
            Err(_) => Ok("cpu".into()),
        }
    }
}
