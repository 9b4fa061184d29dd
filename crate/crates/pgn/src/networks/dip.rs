//! Single-image fitting generator: a small convolutional decoder mapping a
//! frozen noise tensor to an image through repeated bilinear upsampling.
//!
//! The decoder ends in a sigmoid followed by the teacher's channel
//! normalization, so its output always lies in the normalized image of
//! `[0, 1]` pixel space — one optimizer step can move the image only within
//! the valid color range, never outside it.

use crate::nn::conv::Conv2d;
use crate::nn::pool::BilinearUp2;
use crate::nn::{init, Chw, Layer, LeakyRelu, Param, Scalar, Seq, Tensor};
use crate::teacher::{Normalization, IMAGENET_NORMALIZATION};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f64 = 0.2;

/// `y = (sigmoid(t * x) - mean_c) / std_c`: bounds raw logits into the
/// normalized color space. The fixed temperature keeps one optimizer step
/// from swinging the whole image across the color range.
struct SigmoidNormalize<F: Scalar> {
    norm: Normalization,
    temperature: F,
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> SigmoidNormalize<F> {
    fn new(norm: Normalization, temperature: f64) -> Self {
        SigmoidNormalize {
            norm,
            temperature: F::from_f64c(temperature),
            cache: None,
        }
    }

    fn apply(&self, x: &Tensor<F>) -> Tensor<F> {
        let t = self.temperature;
        let mut out = x.clone();
        for c in 0..3 {
            let mean = F::from_f64c(self.norm.mean[c]);
            let std = F::from_f64c(self.norm.std[c]);
            out.index_axis_mut(ndarray::Axis(1), c)
                .mapv_inplace(|v| (crate::heads::sigmoid(t * v) - mean) / std);
        }
        out
    }
}

impl<F: Scalar> Layer<F> for SigmoidNormalize<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.apply(x)
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.cache = Some(x.clone());
        self.apply(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let x = self
            .cache
            .take()
            .expect("SigmoidNormalize::backward without forward_t");
        let t = self.temperature;
        let mut g = grad_out.clone();
        for c in 0..3 {
            let std = F::from_f64c(self.norm.std[c]);
            let mut gc = g.index_axis_mut(ndarray::Axis(1), c);
            let xc = x.index_axis(ndarray::Axis(1), c);
            ndarray::Zip::from(&mut gc).and(&xc).for_each(|gv, &xv| {
                let s = crate::heads::sigmoid(t * xv);
                *gv = *gv * t * s * (F::one() - s) / std;
            });
        }
        g
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        (0, input)
    }
}

/// Decoder shape: noise `(1, noise_channels, noise_size, noise_size)` is
/// upsampled `stages` times, producing an image of side
/// `noise_size * 2^stages`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipGeneratorSpec {
    pub noise_channels: usize,
    pub noise_size: usize,
    pub stages: usize,
    /// Width of the last decoder stage; earlier stages widen toward the
    /// noise end.
    pub base_channels: usize,
}

impl Default for DipGeneratorSpec {
    fn default() -> Self {
        // 64-channel 4x4 noise -> 64x64 image through 4 upsampling stages
        DipGeneratorSpec {
            noise_channels: 64,
            noise_size: 4,
            stages: 4,
            base_channels: 16,
        }
    }
}

impl DipGeneratorSpec {
    pub fn output_size(&self) -> usize {
        self.noise_size << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_channels == 0 || self.noise_size == 0 || self.base_channels == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("generator needs at least one stage".into()));
        }
        Ok(())
    }

    fn stage_channels(&self) -> Vec<usize> {
        // e.g. stages=4, base=16: [64, 48, 32, 24, 16]
        let mut c = Vec::with_capacity(self.stages + 1);
        for i in 0..=self.stages {
            let t = i as f64 / self.stages as f64;
            let v = self.noise_channels as f64
                + t * (self.base_channels as f64 - self.noise_channels as f64);
            c.push(v.round() as usize);
        }
        c
    }

    /// The frozen noise input, drawn uniformly from `[-1, 1)`. The amplitude
    /// keeps the decoder's initial output textured rather than flat gray, so
    /// the initial loss is an honest baseline for the divergence factor.
    pub fn make_noise<F: Scalar>(&self, seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init::uniform::<F>(
            &[1, self.noise_channels, self.noise_size, self.noise_size],
            -1.0,
            1.0,
            &mut rng,
        )
        .into_dimensionality()
        .expect("4d noise")
    }
}

pub struct DipGenerator<F: Scalar> {
    net: Seq<F>,
}

impl<F: Scalar> DipGenerator<F> {
    pub fn new(spec: &DipGeneratorSpec, seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let chans = spec.stage_channels();
        let mut layers: Vec<Box<dyn Layer<F>>> = Vec::new();
        layers.push(Box::new(Conv2d::new(
            spec.noise_channels,
            chans[0],
            3,
            1,
            1,
            true,
            rng,
        )));
        layers.push(Box::new(LeakyRelu::new(LEAKY_SLOPE)));
        for i in 0..spec.stages {
            layers.push(Box::new(BilinearUp2::new()));
            layers.push(Box::new(Conv2d::new(chans[i], chans[i + 1], 3, 1, 1, true, rng)));
            layers.push(Box::new(LeakyRelu::new(LEAKY_SLOPE)));
        }
        layers.push(Box::new(Conv2d::new(
            chans[spec.stages],
            3,
            3,
            1,
            1,
            true,
            rng,
        )));
        layers.push(Box::new(SigmoidNormalize::new(IMAGENET_NORMALIZATION, 0.25)));
        DipGenerator {
            net: Seq::new(layers),
        }
    }
}

impl<F: Scalar> Layer<F> for DipGenerator<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        self.net.forward(x)
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.net.forward_t(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        self.net.backward(grad_out)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.net.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.net.visit_params_mut(f);
    }

    fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        self.net.reinit(rng);
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        self.net.cost(input)
    }
}
