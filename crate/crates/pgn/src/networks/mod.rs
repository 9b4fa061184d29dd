//! Backbone and surrogate architectures.
//!
//! Backbones map the channel-concatenated pair `(yhat, y)` — a 6-channel
//! image — to a 3-channel field of the same spatial size. Two fidelity
//! levels exist per family: `exact` presets reproduce the published
//! parameter budgets (ResNet-4/6/8 ~1.34M/1.93M/2.52M, UNet ~1.77M) and are
//! used for cost accounting; `desk` presets shrink the channel widths for
//! fast CPU training.

pub mod autoencoder;
pub mod checkpoint;
pub mod dip;
pub mod resnet;
pub mod unet;

use crate::heads::HeadVariant;
use crate::nn::{Layer, Scalar, Tensor};
use crate::teacher::Normalization;
use crate::{Error, Result};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub use autoencoder::AutoencoderSpec;
pub use dip::DipGeneratorSpec;

/// Backbones take `(yhat, y)` concatenated along channels.
pub const BACKBONE_IN_CHANNELS: usize = 6;
pub const BACKBONE_OUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    Resnet,
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Published channel widths; used for parameter/MACs accounting.
    Exact,
    /// Reduced widths for desk-scale training.
    Desk,
}

/// Architecture selector for a PGN backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    /// Residual blocks (resnet only); one of 4, 6, 8.
    pub num_blocks: usize,
    /// Downscale/upscale stages (unet only); fixed at 5.
    pub num_scales: usize,
    /// Width scale for desk presets; ignored by exact presets.
    pub base_channels: usize,
    pub fidelity: Fidelity,
}

impl BackboneSpec {
    pub fn resnet_exact(num_blocks: usize) -> Self {
        BackboneSpec {
            family: BackboneFamily::Resnet,
            num_blocks,
            num_scales: 0,
            base_channels: 64,
            fidelity: Fidelity::Exact,
        }
    }

    pub fn unet_exact() -> Self {
        BackboneSpec {
            family: BackboneFamily::Unet,
            num_blocks: 0,
            num_scales: 5,
            base_channels: 64,
            fidelity: Fidelity::Exact,
        }
    }

    pub fn resnet_desk(num_blocks: usize, base_channels: usize) -> Self {
        BackboneSpec {
            family: BackboneFamily::Resnet,
            num_blocks,
            num_scales: 0,
            base_channels,
            fidelity: Fidelity::Desk,
        }
    }

    pub fn unet_desk(base_channels: usize) -> Self {
        BackboneSpec {
            family: BackboneFamily::Unet,
            num_blocks: 0,
            num_scales: 5,
            base_channels,
            fidelity: Fidelity::Desk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            BackboneFamily::Resnet => {
                if !matches!(self.num_blocks, 4 | 6 | 8) {
                    return Err(Error::Config(format!(
                        "resnet num_blocks must be 4, 6 or 8, got {}",
                        self.num_blocks
                    )));
                }
            }
            BackboneFamily::Unet => {
                if self.num_scales != 5 {
                    return Err(Error::Config(format!(
                        "unet num_scales is fixed at 5, got {}",
                        self.num_scales
                    )));
                }
            }
        }
        if self.fidelity == Fidelity::Desk && self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    /// Input H/W must be divisible by this for shape preservation.
    pub fn spatial_divisor(&self) -> usize {
        match self.family {
            BackboneFamily::Resnet => 2,
            BackboneFamily::Unet => 1 << self.num_scales,
        }
    }

    pub fn label(&self) -> String {
        match (self.family, self.fidelity) {
            (BackboneFamily::Resnet, Fidelity::Exact) => format!("ResNet-{}", self.num_blocks),
            (BackboneFamily::Unet, Fidelity::Exact) => "UNet".into(),
            (BackboneFamily::Resnet, Fidelity::Desk) => {
                format!("ResNet-{}-desk{}", self.num_blocks, self.base_channels)
            }
            (BackboneFamily::Unet, Fidelity::Desk) => format!("UNet-desk{}", self.base_channels),
        }
    }
}

/// Builds a seeded backbone from a spec.
pub fn build_backbone<F: Scalar>(spec: &BackboneSpec, seed: u64) -> Result<Box<dyn Layer<F>>> {
    spec.validate()?;
    Ok(match spec.family {
        BackboneFamily::Resnet => Box::new(resnet::ResnetBackbone::new(spec, seed)),
        BackboneFamily::Unet => Box::new(unet::UnetBackbone::new(spec, seed)),
    })
}

/// Concatenates `(yhat, y)` along the channel axis, the backbone input
/// convention.
pub fn concat_pair<F: Scalar>(yhat: &Tensor<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
    if yhat.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "concat_pair: shape {:?} vs {:?}",
            yhat.shape(),
            y.shape()
        )));
    }
    ndarray::concatenate(Axis(1), &[yhat.view(), y.view()])
        .map_err(|e| Error::Dimension(e.to_string()))
}

/// A trained (or fresh) PGN: backbone plus head plus the normalization the
/// constrained head needs.
pub struct PgnModel<F: Scalar> {
    pub backbone: Box<dyn Layer<F>>,
    pub spec: BackboneSpec,
    pub head: HeadVariant,
    pub norm: Normalization,
    pub seed: u64,
    pub step: u64,
}

impl<F: Scalar> PgnModel<F> {
    pub fn new(
        spec: BackboneSpec,
        head: HeadVariant,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        head.validate()?;
        Ok(PgnModel {
            backbone: build_backbone(&spec, seed)?,
            spec,
            head,
            norm,
            seed,
            step: 0,
        })
    }

    /// One frozen forward pass: synthetic gradient plus optional proxy.
    pub fn synthesize(
        &self,
        yhat: &Tensor<F>,
        y: &Tensor<F>,
    ) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
        let input = concat_pair(yhat, y)?;
        let backbone_out = self.backbone.forward(&input);
        crate::heads::synthesize(yhat, y, &backbone_out, &self.head, &self.norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut idx = 0usize;
        self.backbone.visit_params(&mut |p| {
            tensors.push(checkpoint::RawTensor {
                name: format!("p{idx}"),
                shape: p.data.shape().to_vec(),
                data: p.data.iter().map(|v| v.to_f32().unwrap()).collect(),
            });
            idx += 1;
        });
        let meta = checkpoint::CheckpointMeta {
            kind: "pgn".into(),
            backbone: self.spec,
            head: self.head,
            seed: self.seed,
            step: self.step,
        };
        checkpoint::write_checkpoint(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read_checkpoint(path)?;
        if meta.kind != "pgn" {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint kind {:?}, expected \"pgn\"",
                path.display(),
                meta.kind
            )));
        }
        let mut model = PgnModel::<F>::new(meta.backbone, meta.head, IMAGENET, meta.seed)?;
        model.step = meta.step;
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        model.backbone.visit_params_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let Some(t) = tensors.get(idx) else {
                err = Some(Error::Checkpoint(format!(
                    "checkpoint holds {} tensors but the backbone has more parameters",
                    tensors.len()
                )));
                return;
            };
            if t.shape != p.data.shape() {
                err = Some(Error::Checkpoint(format!(
                    "tensor {idx}: shape {:?} vs parameter {:?}",
                    t.shape,
                    p.data.shape()
                )));
                return;
            }
            for (dst, &src) in p.data.iter_mut().zip(t.data.iter()) {
                *dst = F::from_f64c(src as f64);
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, backbone consumed {idx}",
                tensors.len()
            )));
        }
        Ok(model)
    }
}

use crate::teacher::IMAGENET_NORMALIZATION as IMAGENET;

/// Builds a seeded surrogate autoencoder.
pub fn build_autoencoder<F: Scalar>(
    spec: &AutoencoderSpec,
    seed: u64,
) -> Result<Box<dyn Layer<F>>> {
    spec.validate()?;
    Ok(Box::new(autoencoder::Autoencoder::new(spec, seed)))
}

/// Builds the seeded single-image fitting generator.
pub fn build_dip_generator<F: Scalar>(
    spec: &DipGeneratorSpec,
    seed: u64,
) -> Result<Box<dyn Layer<F>>> {
    spec.validate()?;
    Ok(Box::new(dip::DipGenerator::new(spec, seed)))
}
