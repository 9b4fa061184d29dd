//! UNet-style backbone with 5 downscales/upscales.
//!
//! The encoder is a strided 7x7 stem followed by four stages of Double
//! BlazeBlocks (depthwise 5x5 + pointwise pairs with a rectified residual);
//! the decoder interleaves bilinear upsampling, channel concatenation with
//! the matching encoder feature, and separable 3x3 convolutions.

use super::{BackboneSpec, Fidelity};
use crate::nn::conv::{Conv2d, DepthwiseConv2d};
use crate::nn::norm::BatchNorm2d;
use crate::nn::pool::{avg_pool2, avg_pool2_backward, BilinearUp2};
use crate::nn::{Chw, Layer, Param, Relu, Scalar, Seq, Tensor};
use ndarray::{s, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Double BlazeBlock: `dw5x5 -> pw -> BN -> ReLU -> dw5x5 -> pw -> BN`,
/// plus a parameter-free skip (average-pooled when strided, zero-padded when
/// the channel count grows), rectified after the sum.
pub struct DoubleBlazeBlock<F: Scalar> {
    dw1: DepthwiseConv2d<F>,
    pw1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    dw2: DepthwiseConv2d<F>,
    pw2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    stride: usize,
    c_in: usize,
    c_out: usize,
    cache_mid_pre: Option<Tensor<F>>,
    cache_out_pre: Option<Tensor<F>>,
}

impl<F: Scalar> DoubleBlazeBlock<F> {
    pub fn new(c_in: usize, c_out: usize, mid: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(c_out >= c_in, "blaze block cannot shrink channels");
        DoubleBlazeBlock {
            dw1: DepthwiseConv2d::new(c_in, 5, stride, 2, true, rng),
            pw1: Conv2d::new(c_in, mid, 1, 1, 0, true, rng),
            bn1: BatchNorm2d::new(mid),
            dw2: DepthwiseConv2d::new(mid, 5, 1, 2, true, rng),
            pw2: Conv2d::new(mid, c_out, 1, 1, 0, true, rng),
            bn2: BatchNorm2d::new(c_out),
            stride,
            c_in,
            c_out,
            cache_mid_pre: None,
            cache_out_pre: None,
        }
    }

    fn skip(&self, x: &Tensor<F>) -> Tensor<F> {
        let pooled = if self.stride == 2 {
            avg_pool2(x)
        } else {
            x.clone()
        };
        if self.c_out == self.c_in {
            pooled
        } else {
            let (b, _, h, w) = (
                pooled.shape()[0],
                pooled.shape()[1],
                pooled.shape()[2],
                pooled.shape()[3],
            );
            let mut padded = Array4::zeros((b, self.c_out, h, w));
            padded
                .slice_mut(s![.., ..self.c_in, .., ..])
                .assign(&pooled);
            padded
        }
    }

    fn skip_backward(&self, g: &Tensor<F>) -> Tensor<F> {
        let truncated = g.slice(s![.., ..self.c_in, .., ..]).to_owned();
        if self.stride == 2 {
            avg_pool2_backward(&truncated)
        } else {
            truncated
        }
    }
}

fn relu_fwd<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

fn relu_mask<F: Scalar>(g: &mut Tensor<F>, pre: &Tensor<F>) {
    g.zip_mut_with(pre, |gv, &pv| {
        if pv <= F::zero() {
            *gv = F::zero();
        }
    });
}

impl<F: Scalar> Layer<F> for DoubleBlazeBlock<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let t = self.bn1.forward(&self.pw1.forward(&self.dw1.forward(x)));
        let m = relu_fwd(&t);
        let u = self.bn2.forward(&self.pw2.forward(&self.dw2.forward(&m)));
        let mut pre = u;
        pre += &self.skip(x);
        relu_fwd(&pre)
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let t = self
            .bn1
            .forward_t(&self.pw1.forward_t(&self.dw1.forward_t(x)));
        let m = relu_fwd(&t);
        self.cache_mid_pre = Some(t);
        let u = self
            .bn2
            .forward_t(&self.pw2.forward_t(&self.dw2.forward_t(&m)));
        let mut pre = u;
        pre += &self.skip(x);
        let out = relu_fwd(&pre);
        self.cache_out_pre = Some(pre);
        out
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let out_pre = self
            .cache_out_pre
            .take()
            .expect("DoubleBlazeBlock::backward without forward_t");
        let mid_pre = self.cache_mid_pre.take().expect("missing mid cache");
        let mut gm = grad_out.clone();
        relu_mask(&mut gm, &out_pre);

        let mut g_mid = self
            .dw2
            .backward(&self.pw2.backward(&self.bn2.backward(&gm)));
        relu_mask(&mut g_mid, &mid_pre);
        let g_path = self
            .dw1
            .backward(&self.pw1.backward(&self.bn1.backward(&g_mid)));

        let mut dx = g_path;
        dx += &self.skip_backward(&gm);
        dx
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.dw1.visit_params(f);
        self.pw1.visit_params(f);
        self.bn1.visit_params(f);
        self.dw2.visit_params(f);
        self.pw2.visit_params(f);
        self.bn2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.dw1.visit_params_mut(f);
        self.pw1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.dw2.visit_params_mut(f);
        self.pw2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
    }

    fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        self.dw1.reinit(rng);
        self.pw1.reinit(rng);
        self.bn1.reinit(rng);
        self.dw2.reinit(rng);
        self.pw2.reinit(rng);
        self.bn2.reinit(rng);
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let (m1, s1) = self.dw1.cost(input);
        let (m2, s2) = self.pw1.cost(s1);
        let (m3, s3) = self.dw2.cost(s2);
        let (m4, s4) = self.pw2.cost(s3);
        (m1 + m2 + m3 + m4, s4)
    }
}

/// Separable conv unit used by the decoder: depthwise 3x3, pointwise 1x1,
/// rectifier.
fn sep_conv<F: Scalar>(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Seq<F> {
    Seq::new(vec![
        Box::new(DepthwiseConv2d::new(c_in, 3, 1, 1, true, rng)),
        Box::new(Conv2d::new(c_in, c_out, 1, 1, 0, true, rng)),
        Box::new(Relu::new()),
    ])
}

struct DecoderStage<F: Scalar> {
    up: BilinearUp2<F>,
    convs: Seq<F>,
    /// channels of the upsampled path (first chunk of the concatenation)
    d_channels: usize,
    skip_channels: usize,
}

/// Channel plan for a spec: encoder stage widths, decoder stage widths.
fn channel_plan(spec: &BackboneSpec) -> (Vec<usize>, Vec<usize>) {
    match spec.fidelity {
        // Tuned to land within 2% of the published 1.77M parameters.
        Fidelity::Exact => (vec![64, 64, 128, 256, 512], vec![256, 144, 96, 64, 48]),
        Fidelity::Desk => {
            let b = spec.base_channels;
            (
                vec![b, b, 2 * b, 4 * b, 8 * b],
                vec![4 * b, 2 * b, b, b, b],
            )
        }
    }
}

pub struct UnetBackbone<F: Scalar> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    stages: Vec<(DoubleBlazeBlock<F>, DoubleBlazeBlock<F>)>,
    dec: Vec<DecoderStage<F>>,
    final_conv: Conv2d<F>,
    cache_stem_pre: Option<Tensor<F>>,
}

impl<F: Scalar> UnetBackbone<F> {
    pub fn new(spec: &BackboneSpec, seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let (enc, dec_out) = channel_plan(spec);
        let conv1 = Conv2d::new(6, enc[0], 7, 2, 3, false, rng);
        let bn1 = BatchNorm2d::new(enc[0]);
        let mut stages = Vec::new();
        for i in 1..enc.len() {
            let (cin, cout) = (enc[i - 1], enc[i]);
            stages.push((
                DoubleBlazeBlock::new(cin, cout, cout, 2, rng),
                DoubleBlazeBlock::new(cout, cout, cout, 1, rng),
            ));
        }
        // skips in decoder order: f4, f3, f2, f1, network input
        let skips = [enc[3], enc[2], enc[1], enc[0], 6];
        let mut dec = Vec::new();
        let mut d_ch = enc[4];
        for (j, &out_ch) in dec_out.iter().enumerate() {
            let cat = d_ch + skips[j];
            let convs = Seq::new(vec![
                Box::new(sep_conv::<F>(cat, out_ch, rng)) as Box<dyn Layer<F>>,
                Box::new(sep_conv::<F>(out_ch, out_ch, rng)),
            ]);
            dec.push(DecoderStage {
                up: BilinearUp2::new(),
                convs,
                d_channels: d_ch,
                skip_channels: skips[j],
            });
            d_ch = out_ch;
        }
        let final_conv = Conv2d::new(d_ch, 3, 3, 1, 1, true, rng);
        UnetBackbone {
            conv1,
            bn1,
            stages,
            dec,
            final_conv,
            cache_stem_pre: None,
        }
    }

    fn concat(d: &Tensor<F>, skip: &Tensor<F>) -> Tensor<F> {
        ndarray::concatenate(Axis(1), &[d.view(), skip.view()]).expect("unet concat")
    }
}

impl<F: Scalar> Layer<F> for UnetBackbone<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let f1 = relu_fwd(&self.bn1.forward(&self.conv1.forward(x)));
        let mut feats = vec![f1];
        for (a, b) in &self.stages {
            let prev = feats.last().unwrap();
            feats.push(b.forward(&a.forward(prev)));
        }
        // feats = [f1, f2, f3, f4, bottleneck]
        let mut d = feats[4].clone();
        let skips: [&Tensor<F>; 5] = [&feats[3], &feats[2], &feats[1], &feats[0], x];
        for (stage, skip) in self.dec.iter().zip(skips.iter()) {
            let up = stage.up.forward(&d);
            d = stage.convs.forward(&Self::concat(&up, skip));
        }
        self.final_conv.forward(&d)
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let pre = self.bn1.forward_t(&self.conv1.forward_t(x));
        let f1 = relu_fwd(&pre);
        self.cache_stem_pre = Some(pre);
        let mut feats = vec![f1];
        for (a, b) in &mut self.stages {
            let prev = feats.last().unwrap().clone();
            feats.push(b.forward_t(&a.forward_t(&prev)));
        }
        let mut d = feats[4].clone();
        let skips: [&Tensor<F>; 5] = [&feats[3], &feats[2], &feats[1], &feats[0], x];
        for (stage, skip) in self.dec.iter_mut().zip(skips.iter()) {
            let up = stage.up.forward_t(&d);
            d = stage.convs.forward_t(&Self::concat(&up, skip));
        }
        self.final_conv.forward_t(&d)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let mut g = self.final_conv.backward(grad_out);

        // Decoder stage j consumed skip feats[4-j-1] (and stage 4 the raw
        // input). Walking the decoder in reverse collects skip gradients in
        // the order [x, f1, f2, f3, f4].
        let mut skip_grads: Vec<Tensor<F>> = Vec::with_capacity(self.dec.len());
        for stage in self.dec.iter_mut().rev() {
            let g_cat = stage.convs.backward(&g);
            let g_up = g_cat.slice(s![.., ..stage.d_channels, .., ..]).to_owned();
            let g_skip = g_cat
                .slice(s![
                    ..,
                    stage.d_channels..stage.d_channels + stage.skip_channels,
                    ..,
                    ..
                ])
                .to_owned();
            skip_grads.push(g_skip);
            g = stage.up.backward(&g_up);
        }

        // g now holds the bottleneck gradient; encoder stage i maps feats[i]
        // to feats[i+1], and feats[i] also received skip_grads[i+1].
        for i in (0..self.stages.len()).rev() {
            let (a, b) = &mut self.stages[i];
            g = a.backward(&b.backward(&g));
            g += &skip_grads[i + 1];
        }

        let stem_pre = self
            .cache_stem_pre
            .take()
            .expect("UnetBackbone::backward without forward_t");
        relu_mask(&mut g, &stem_pre);
        let mut dx = self.conv1.backward(&self.bn1.backward(&g));
        dx += &skip_grads[0];
        dx
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        for (a, b) in &self.stages {
            a.visit_params(f);
            b.visit_params(f);
        }
        for d in &self.dec {
            d.convs.visit_params(f);
        }
        self.final_conv.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        for (a, b) in &mut self.stages {
            a.visit_params_mut(f);
            b.visit_params_mut(f);
        }
        for d in &mut self.dec {
            d.convs.visit_params_mut(f);
        }
        self.final_conv.visit_params_mut(f);
    }

    fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        self.conv1.reinit(rng);
        self.bn1.reinit(rng);
        for (a, b) in &mut self.stages {
            a.reinit(rng);
            b.reinit(rng);
        }
        for d in &mut self.dec {
            d.convs.reinit(rng);
        }
        self.final_conv.reinit(rng);
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let mut macs = 0u64;
        let (m, mut shape) = self.conv1.cost(input);
        macs += m;
        let mut enc_shapes = vec![shape];
        for (a, b) in &self.stages {
            let (ma, sa) = a.cost(shape);
            let (mb, sb) = b.cost(sa);
            macs += ma + mb;
            shape = sb;
            enc_shapes.push(shape);
        }
        let skips: Vec<Chw> = vec![
            enc_shapes[3],
            enc_shapes[2],
            enc_shapes[1],
            enc_shapes[0],
            input,
        ];
        for (stage, skip) in self.dec.iter().zip(skips.iter()) {
            let up = (shape.0, shape.1 * 2, shape.2 * 2);
            let cat = (up.0 + skip.0, up.1, up.2);
            let (m, s) = stage.convs.cost(cat);
            macs += m;
            shape = s;
        }
        let (m, s) = self.final_conv.cost(shape);
        (macs + m, s)
    }
}
