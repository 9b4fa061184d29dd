//! Surrogate autoencoders: shallow skip-free encoder/decoder stacks used as
//! moving image generators during distillation.

use crate::nn::conv::Conv2d;
use crate::nn::pool::BilinearUp2;
use crate::nn::{Chw, Layer, LeakyRelu, Param, Scalar, Seq, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f64 = 0.2;

/// Depth preset (number of stride-2 encoder stages, one of 2/3/4) plus the
/// width of the first stage. Channels double per stage, capped at `8 * base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub depth: usize,
    pub base_channels: usize,
}

impl AutoencoderSpec {
    pub fn new(depth: usize, base_channels: usize) -> Self {
        AutoencoderSpec {
            depth,
            base_channels,
        }
    }

    /// The three desk presets, shallowest first.
    pub fn desk_presets(base_channels: usize) -> [AutoencoderSpec; 3] {
        [
            AutoencoderSpec::new(2, base_channels),
            AutoencoderSpec::new(3, base_channels),
            AutoencoderSpec::new(4, base_channels),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.depth) {
            return Err(Error::Config(format!(
                "autoencoder depth must be 2, 3 or 4, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    fn stage_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_channels << i).min(self.base_channels * 8))
            .collect()
    }
}

/// Skip-free reconstruction network: 3-channel image in, 3-channel image out,
/// same spatial size (input H/W must be divisible by `2^depth`).
pub struct Autoencoder<F: Scalar> {
    net: Seq<F>,
}

impl<F: Scalar> Autoencoder<F> {
    pub fn new(spec: &AutoencoderSpec, seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let chans = spec.stage_channels();
        let mut layers: Vec<Box<dyn Layer<F>>> = Vec::new();
        let mut prev = 3usize;
        for &c in &chans {
            layers.push(Box::new(Conv2d::new(prev, c, 3, 2, 1, true, rng)));
            layers.push(Box::new(LeakyRelu::new(LEAKY_SLOPE)));
            prev = c;
        }
        for i in (0..chans.len()).rev() {
            let next = if i == 0 { chans[0] } else { chans[i - 1] };
            layers.push(Box::new(BilinearUp2::new()));
            layers.push(Box::new(Conv2d::new(prev, next, 3, 1, 1, true, rng)));
            layers.push(Box::new(LeakyRelu::new(LEAKY_SLOPE)));
            prev = next;
        }
        layers.push(Box::new(Conv2d::new(prev, 3, 3, 1, 1, true, rng)));
        Autoencoder {
            net: Seq::new(layers),
        }
    }
}

impl<F: Scalar> Layer<F> for Autoencoder<F> {
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
