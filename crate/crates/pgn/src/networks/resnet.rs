//! ResNet-style backbone: strided stem, residual blocks at half resolution,
//! bilinear upsampling back to full resolution.

use super::BackboneSpec;
use crate::nn::conv::Conv2d;
use crate::nn::norm::BatchNorm2d;
use crate::nn::pool::BilinearUp2;
use crate::nn::{Chw, Layer, LeakyRelu, Param, Residual, Scalar, Seq, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LEAKY_SLOPE: f64 = 0.2;

/// Conv + optional BatchNorm + LeakyReLU, the backbone's basic unit.
fn conv_unit<F: Scalar>(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    with_bn: bool,
    with_act: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Box<dyn Layer<F>>> {
    let mut out: Vec<Box<dyn Layer<F>>> = Vec::new();
    out.push(Box::new(Conv2d::new(
        c_in,
        c_out,
        k,
        stride,
        (k - 1) / 2,
        !with_bn,
        rng,
    )));
    if with_bn {
        out.push(Box::new(BatchNorm2d::new(c_out)));
    }
    if with_act {
        out.push(Box::new(LeakyRelu::new(LEAKY_SLOPE)));
    }
    out
}

pub struct ResnetBackbone<F: Scalar> {
    net: Seq<F>,
}

impl<F: Scalar> ResnetBackbone<F> {
    pub fn new(spec: &BackboneSpec, seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let (stem_c, block_c, with_bn) = match spec.fidelity {
            super::Fidelity::Exact => (64usize, 128usize, true),
            super::Fidelity::Desk => (spec.base_channels, spec.base_channels * 2, false),
        };
        let mut layers: Vec<Box<dyn Layer<F>>> = Vec::new();
        layers.extend(conv_unit(6, stem_c, 7, 1, with_bn, true, rng));
        layers.extend(conv_unit(stem_c, block_c, 3, 2, with_bn, true, rng));
        for _ in 0..spec.num_blocks {
            let mut body: Vec<Box<dyn Layer<F>>> = Vec::new();
            body.extend(conv_unit(block_c, block_c, 3, 1, with_bn, true, rng));
            body.extend(conv_unit(block_c, block_c, 3, 1, with_bn, false, rng));
            layers.push(Box::new(Residual::new(Seq::new(body))));
        }
        layers.push(Box::new(BilinearUp2::new()));
        layers.extend(conv_unit(block_c, stem_c, 3, 1, with_bn, true, rng));
        layers.push(Box::new(Conv2d::new(stem_c, 3, 7, 1, 3, true, rng)));
        ResnetBackbone {
            net: Seq::new(layers),
        }
    }
}

impl<F: Scalar> Layer<F> for ResnetBackbone<F> {
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
