//! The perceptual-loss teacher: a frozen VGG-style stack of 3x3 convolutions
//! and rectifiers with 2x2 *average* pooling between stages.
//!
//! The loss between two images is the sum of L1 distances between the
//! post-rectifier activations of both images at the tapped layers. The
//! backward pass through this loss is written out by hand, so the teacher can
//! hand its exact input gradient to the rest of the pipeline without any
//! autodiff machinery.
//!
//! Two specs ship with the crate: `vgg19` (the full feature stack up to and
//! including the 13th convolution, matching the published parameter count of
//! 12.94M) and `tiny`, an 8-convolution desk-scale teacher with seeded frozen
//! weights used for training and tests.

use crate::networks::checkpoint::{read_raw_tensors, write_raw_tensors, RawTensor};
use crate::nn::conv::{conv2d_forward, conv2d_input_grad, conv_out_size};
use crate::nn::pool::{avg_pool2, avg_pool2_backward};
use crate::nn::{init, Scalar, Tensor};
use crate::{Error, Result};
use ndarray::{Array1, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-channel normalization constants mapping raw `[0, 1]` pixels into the
/// teacher's input space: `normalized = (raw - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// The standard ImageNet constants used by the pretrained-VGG pipeline.
pub const IMAGENET_NORMALIZATION: Normalization = Normalization {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

/// Where teacher weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsSource {
    /// Full VGG-19 feature stack; weights are expected from an external file
    /// (see [`Teacher::load_weights`]). Without a file the structure is still
    /// buildable with seeded weights for cost accounting.
    FullVgg19Pretrained,
    /// Small fixed-seed teacher used at desk scale.
    TinySeeded,
}

/// Architecture of a teacher network.
///
/// `conv_plan[i]` is the output channel count of the `i`-th 3x3 convolution;
/// `pool_positions` lists convolution indices after whose rectifier a 2x2
/// average pooling is inserted; `tap_layers` lists the convolutions whose
/// post-rectifier activations enter the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub conv_plan: Vec<usize>,
    pub pool_positions: Vec<usize>,
    pub tap_layers: Vec<usize>,
    pub normalization: Normalization,
    pub weights_source: WeightsSource,
}

impl TeacherSpec {
    /// Desk-scale teacher: 8 convolutions (16-16-32-32-64-64-128-128),
    /// average pooling after layers 2, 4 and 6, a tap after every rectifier.
    pub fn tiny() -> Self {
        TeacherSpec {
            conv_plan: vec![16, 16, 32, 32, 64, 64, 128, 128],
            pool_positions: vec![1, 3, 5],
            tap_layers: (0..8).collect(),
            normalization: IMAGENET_NORMALIZATION,
            weights_source: WeightsSource::TinySeeded,
        }
    }

    /// VGG-19 feature stack up to and including `conv5_1`, with all max
    /// pooling replaced by average pooling and a tap after every rectifier.
    pub fn vgg19() -> Self {
        TeacherSpec {
            conv_plan: vec![64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512],
            pool_positions: vec![1, 3, 7, 11],
            tap_layers: (0..13).collect(),
            normalization: IMAGENET_NORMALIZATION,
            weights_source: WeightsSource::FullVgg19Pretrained,
        }
    }

    pub fn num_convs(&self) -> usize {
        self.conv_plan.len()
    }

    fn validate(&self) -> Result<()> {
        if self.conv_plan.is_empty() {
            return Err(Error::Config("teacher conv plan is empty".into()));
        }
        for &p in &self.pool_positions {
            if p >= self.conv_plan.len() {
                return Err(Error::Config(format!(
                    "pool position {p} out of range (plan has {} convs)",
                    self.conv_plan.len()
                )));
            }
        }
        for &t in &self.tap_layers {
            if t >= self.conv_plan.len() {
                return Err(Error::Config(format!(
                    "tap layer {t} out of range (plan has {} convs)",
                    self.conv_plan.len()
                )));
            }
        }
        Ok(())
    }

    /// Total parameter count (weights + biases) of the spec.
    pub fn param_count(&self) -> u64 {
        let mut c_in = 3usize;
        let mut n = 0u64;
        for &c_out in &self.conv_plan {
            n += (9 * c_in * c_out + c_out) as u64;
            c_in = c_out;
        }
        n
    }

    /// Analytic multiply-accumulate count of a single-image forward pass at
    /// the given resolution, counting `k^2*Cin*Cout*Ho*Wo` per convolution
    /// plus `Cout*Ho*Wo` bias adds; pooling and rectifiers are free.
    pub fn forward_macs(&self, h: usize, w: usize) -> u64 {
        let mut c_in = 3usize;
        let (mut h, mut w) = (h, w);
        let mut macs = 0u64;
        for (i, &c_out) in self.conv_plan.iter().enumerate() {
            let ho = conv_out_size(h, 3, 1, 1);
            let wo = conv_out_size(w, 3, 1, 1);
            macs += (9 * c_in * c_out * ho * wo) as u64 + (c_out * ho * wo) as u64;
            c_in = c_out;
            h = ho;
            w = wo;
            if self.pool_positions.contains(&i) {
                h /= 2;
                w /= 2;
            }
        }
        macs
    }

    /// Reporting convention for the cost of one gradient evaluation: the loss
    /// forward pass runs the stack on both images of the pair, and the
    /// gradient is charged at three single-image forwards per image of the
    /// pair (2 forward + 1 backward).
    pub fn pair_gradient_macs(&self, h: usize, w: usize) -> u64 {
        3 * 2 * self.forward_macs(h, w)
    }
}

/// A frozen teacher network.
///
/// Weights are immutable after construction; every method takes `&self` and
/// the struct is `Send + Sync`, so concurrent use is safe.
pub struct Teacher<F: Scalar> {
    spec: TeacherSpec,
    weights: Vec<Array4<F>>, // (out, in, 3, 3) per conv
    biases: Vec<Array1<F>>,
}

impl<F: Scalar> Teacher<F> {
    /// Builds a teacher with seeded He-normal weights and zero biases.
    pub fn build(spec: TeacherSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(spec.conv_plan.len());
        let mut biases = Vec::with_capacity(spec.conv_plan.len());
        let mut c_in = 3usize;
        for &c_out in &spec.conv_plan {
            weights.push(
                init::he_normal::<F>(&[c_out, c_in, 3, 3], &mut rng)
                    .into_dimensionality()
                    .expect("4d weight"),
            );
            biases.push(Array1::zeros(c_out));
            c_in = c_out;
        }
        Ok(Teacher {
            spec,
            weights,
            biases,
        })
    }

    /// Builds a teacher from explicit weights (used by tests and the weight
    /// file loader). Shapes must match the spec.
    pub fn from_weights(
        spec: TeacherSpec,
        weights: Vec<Array4<F>>,
        biases: Vec<Array1<F>>,
    ) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.conv_plan.len() || biases.len() != spec.conv_plan.len() {
            return Err(Error::Config(format!(
                "expected {} weight/bias pairs, got {}/{}",
                spec.conv_plan.len(),
                weights.len(),
                biases.len()
            )));
        }
        let mut c_in = 3usize;
        for (i, (&c_out, (w, b))) in spec
            .conv_plan
            .iter()
            .zip(weights.iter().zip(biases.iter()))
            .enumerate()
        {
            if w.shape() != [c_out, c_in, 3, 3] {
                return Err(Error::Dimension(format!(
                    "conv {i}: weight shape {:?}, expected {:?}",
                    w.shape(),
                    [c_out, c_in, 3, 3]
                )));
            }
            if b.len() != c_out {
                return Err(Error::Dimension(format!(
                    "conv {i}: bias length {}, expected {c_out}",
                    b.len()
                )));
            }
            c_in = c_out;
        }
        Ok(Teacher {
            spec,
            weights,
            biases,
        })
    }

    /// Loads teacher weights from a raw tensor container (see the README for
    /// the layout: layer-ordered `conv{i}.weight`, `conv{i}.bias`).
    pub fn load_weights(spec: TeacherSpec, path: &Path) -> Result<Self> {
        let tensors = read_raw_tensors(path)?;
        let expect = spec.conv_plan.len() * 2;
        if tensors.len() != expect {
            return Err(Error::Checkpoint(format!(
                "weight file holds {} tensors, expected {expect}",
                tensors.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in tensors.chunks(2) {
            let w = &pair[0];
            let b = &pair[1];
            weights.push(
                Array4::from_shape_vec(
                    (w.shape[0], w.shape[1], w.shape[2], w.shape[3]),
                    w.data.iter().map(|&v| F::from_f64c(v as f64)).collect(),
                )
                .map_err(|e| Error::Checkpoint(format!("weight tensor: {e}")))?,
            );
            biases.push(Array1::from_vec(
                b.data.iter().map(|&v| F::from_f64c(v as f64)).collect(),
            ));
        }
        Self::from_weights(spec, weights, biases)
    }

    /// Writes the teacher weights in the container format accepted by
    /// [`Teacher::load_weights`].
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            tensors.push(RawTensor {
                name: format!("conv{i}.weight"),
                shape: w.shape().to_vec(),
                data: w.iter().map(|v| v.to_f32().unwrap()).collect(),
            });
            tensors.push(RawTensor {
                name: format!("conv{i}.bias"),
                shape: vec![b.len()],
                data: b.iter().map(|v| v.to_f32().unwrap()).collect(),
            });
        }
        write_raw_tensors(path, &tensors)
    }

    pub fn spec(&self) -> &TeacherSpec {
        &self.spec
    }

    /// Weight and bias of the `i`-th convolution (read-only; the teacher is
    /// frozen).
    pub fn conv_weights(&self, i: usize) -> (&Array4<F>, &Array1<F>) {
        (&self.weights[i], &self.biases[i])
    }

    pub fn normalization(&self) -> &Normalization {
        &self.spec.normalization
    }

    /// Human-readable layer listing, in forward order.
    pub fn structure(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut c_in = 3usize;
        for (i, &c_out) in self.spec.conv_plan.iter().enumerate() {
            out.push(format!("conv3x3({c_in}->{c_out})"));
            out.push("relu".into());
            if self.spec.tap_layers.contains(&i) {
                out.push("tap".into());
            }
            if self.spec.pool_positions.contains(&i) {
                out.push("avgpool2x2".into());
            }
            c_in = c_out;
        }
        out
    }

    /// Total scalar parameter count by direct enumeration.
    pub fn param_count(&self) -> u64 {
        self.weights.iter().map(|w| w.len() as u64).sum::<u64>()
            + self.biases.iter().map(|b| b.len() as u64).sum::<u64>()
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.shape()[1] != 3 {
            return Err(Error::Dimension(format!(
                "teacher input must have 3 channels, got {}",
                x.shape()[1]
            )));
        }
        let (mut h, mut w) = (x.shape()[2], x.shape()[3]);
        for (i, _) in self.spec.conv_plan.iter().enumerate() {
            if self.spec.pool_positions.contains(&i) {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Dimension(format!(
                        "pooling after conv {i} requires even spatial size, got {h}x{w}"
                    )));
                }
                h /= 2;
                w /= 2;
            }
            if h == 0 || w == 0 {
                return Err(Error::Dimension(format!(
                    "input too small: spatial size vanishes at conv {i}"
                )));
            }
        }
        Ok(())
    }

    fn weight_mat(&self, i: usize) -> ArrayView2<'_, F> {
        let c_out = self.weights[i].shape()[0];
        let c_in = self.weights[i].shape()[1];
        self.weights[i]
            .view()
            .into_shape_with_order((c_out, c_in * 9))
            .expect("weight reshape")
    }

    /// All post-rectifier activations, in layer order (before any pooling).
    fn activations(&self, x: &Tensor<F>) -> Vec<Tensor<F>> {
        let mut acts = Vec::with_capacity(self.spec.conv_plan.len());
        let mut h = x.clone();
        for i in 0..self.spec.conv_plan.len() {
            let c_in = self.weights[i].shape()[1];
            let mut a = conv2d_forward(&h, &self.weight_mat(i), Some(&self.biases[i]), c_in, 3, 1, 1);
            a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            h = if self.spec.pool_positions.contains(&i) {
                avg_pool2(&a)
            } else {
                a.clone()
            };
            acts.push(a);
        }
        acts
    }

    /// Feature maps at the tapped layers, in tap order.
    pub fn features(&self, x: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        self.check_input(x)?;
        let acts = self.activations(x);
        Ok(self
            .spec
            .tap_layers
            .iter()
            .map(|&t| acts[t].clone())
            .collect())
    }

    /// Perceptual loss per batch element: the sum over taps and elements of
    /// the absolute activation differences. Non-negative; zero iff all tapped
    /// features agree.
    pub fn perceptual_loss(&self, yhat: &Tensor<F>, y: &Tensor<F>) -> Result<Array1<F>> {
        if yhat.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "perceptual_loss: shape {:?} vs {:?}",
                yhat.shape(),
                y.shape()
            )));
        }
        self.check_input(yhat)?;
        let a_hat = self.activations(yhat);
        let a_ref = self.activations(y);
        let b = yhat.shape()[0];
        let mut loss = Array1::zeros(b);
        for &t in &self.spec.tap_layers {
            for bi in 0..b {
                let d = &a_hat[t].index_axis(ndarray::Axis(0), bi)
                    - &a_ref[t].index_axis(ndarray::Axis(0), bi);
                loss[bi] += d.iter().map(|v| v.abs()).sum::<F>();
            }
        }
        Ok(loss)
    }

    /// Exact reverse-mode gradient of the summed per-image perceptual loss
    /// with respect to `yhat`. The L1 subgradient at zero is taken to be
    /// zero, so `perceptual_grad(y, y)` vanishes identically.
    pub fn perceptual_grad(&self, yhat: &Tensor<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.loss_and_grad(yhat, y)?.1)
    }

    /// Computes the loss and its gradient in one pass over the activations.
    pub fn loss_and_grad(&self, yhat: &Tensor<F>, y: &Tensor<F>) -> Result<(Array1<F>, Tensor<F>)> {
        if yhat.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "loss_and_grad: shape {:?} vs {:?}",
                yhat.shape(),
                y.shape()
            )));
        }
        self.check_input(yhat)?;
        let a_hat = self.activations(yhat);
        let a_ref = self.activations(y);

        let b = yhat.shape()[0];
        let mut loss = Array1::zeros(b);
        for &t in &self.spec.tap_layers {
            for bi in 0..b {
                let d = &a_hat[t].index_axis(ndarray::Axis(0), bi)
                    - &a_ref[t].index_axis(ndarray::Axis(0), bi);
                loss[bi] += d.iter().map(|v| v.abs()).sum::<F>();
            }
        }

        let seeds: Vec<Option<Tensor<F>>> = (0..self.spec.conv_plan.len())
            .map(|l| {
                self.spec.tap_layers.contains(&l).then(|| {
                    let mut s = a_hat[l].clone();
                    s.zip_mut_with(&a_ref[l], |sv, &rv| {
                        let d = *sv - rv;
                        *sv = if d > F::zero() {
                            F::one()
                        } else if d < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                    });
                    s
                })
            })
            .collect();
        let grad = self.vjp_from_seeds(yhat, &a_hat, seeds);
        Ok((loss, grad))
    }

    /// Gradient of `sum_i <seed_i, a_i(x)>` with respect to `x`, where `a_i`
    /// are the post-rectifier activations at the tapped layers. Seeds are
    /// given in tap order and must match the tap shapes.
    pub fn feature_vjp(&self, x: &Tensor<F>, tap_seeds: &[Tensor<F>]) -> Result<Tensor<F>> {
        self.check_input(x)?;
        if tap_seeds.len() != self.spec.tap_layers.len() {
            return Err(Error::Dimension(format!(
                "feature_vjp: {} seeds for {} taps",
                tap_seeds.len(),
                self.spec.tap_layers.len()
            )));
        }
        let acts = self.activations(x);
        let mut seeds: Vec<Option<Tensor<F>>> = vec![None; self.spec.conv_plan.len()];
        for (&t, s) in self.spec.tap_layers.iter().zip(tap_seeds.iter()) {
            if s.shape() != acts[t].shape() {
                return Err(Error::Dimension(format!(
                    "feature_vjp: seed shape {:?} vs tap shape {:?} at conv {t}",
                    s.shape(),
                    acts[t].shape()
                )));
            }
            seeds[t] = Some(s.clone());
        }
        Ok(self.vjp_from_seeds(x, &acts, seeds))
    }

    /// Core backward walk: accumulates tap seeds, masks through rectifiers
    /// and chains conv/pool adjoints down to the input.
    fn vjp_from_seeds(
        &self,
        x: &Tensor<F>,
        acts: &[Tensor<F>],
        seeds: Vec<Option<Tensor<F>>>,
    ) -> Tensor<F> {
        let n = self.spec.conv_plan.len();
        let mut g: Option<Tensor<F>> = None;
        for l in (0..n).rev() {
            let mut gl = match (g, &seeds[l]) {
                (Some(mut gl), Some(s)) => {
                    gl += s;
                    gl
                }
                (Some(gl), None) => gl,
                (None, Some(s)) => s.clone(),
                (None, None) => Array4::zeros(acts[l].raw_dim()),
            };
            // rectifier mask (derivative 0 at zero pre-activation)
            gl.zip_mut_with(&acts[l], |gv, &av| {
                if av <= F::zero() {
                    *gv = F::zero();
                }
            });
            let c_in = self.weights[l].shape()[1];
            let (in_h, in_w) = (gl.shape()[2], gl.shape()[3]);
            let mut gi = conv2d_input_grad(&gl, &self.weight_mat(l), c_in, 3, 1, 1, in_h, in_w);
            if l > 0 && self.spec.pool_positions.contains(&(l - 1)) {
                gi = avg_pool2_backward(&gi);
            }
            g = Some(gi);
        }
        g.unwrap_or_else(|| Array4::zeros(x.raw_dim()))
    }
}

/// Normalizes raw `[0, 1]` pixels into teacher space.
pub fn normalize<F: Scalar>(raw: &Tensor<F>, norm: &Normalization) -> Tensor<F> {
    let mut out = raw.clone();
    for c in 0..3 {
        let mean = F::from_f64c(norm.mean[c]);
        let std = F::from_f64c(norm.std[c]);
        out.index_axis_mut(ndarray::Axis(1), c)
            .mapv_inplace(|v| (v - mean) / std);
    }
    out
}

/// Maps teacher-space values back to raw pixels (not clipped).
pub fn denormalize<F: Scalar>(x: &Tensor<F>, norm: &Normalization) -> Tensor<F> {
    let mut out = x.clone();
    for c in 0..3 {
        let mean = F::from_f64c(norm.mean[c]);
        let std = F::from_f64c(norm.std[c]);
        out.index_axis_mut(ndarray::Axis(1), c)
            .mapv_inplace(|v| v * std + mean);
    }
    out
}
