//! A small CPU layer library with hand-written backward passes.
//!
//! Everything here is deliberately minimal: the networks in this crate are
//! feedforward image-to-image graphs, so instead of a general autodiff tape
//! each layer caches what its own backward pass needs during `forward_t` and
//! `backward` is called in exact reverse order. All layers are generic over
//! `f32`/`f64`; training runs in `f32`, numerical oracles in `f64`.
//!
//! Determinism contract: given the same seed and inputs, every operation
//! produces bit-identical results across runs on the same build. Parallelism
//! is only used over disjoint output slices (batch entries); reductions over
//! the batch are performed in index order.

pub mod adam;
pub mod conv;
pub mod init;
pub mod norm;
pub mod pool;

use ndarray::{ArrayD, Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Element type of all tensors: `f32` for training speed, `f64` for oracles.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + 'static
{
    fn from_f64c(v: f64) -> Self {
        Self::from(v).expect("f64 constant representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Image batch tensor, laid out `(batch, channels, height, width)`.
pub type Tensor<F> = Array4<F>;

/// Per-image shape `(channels, height, width)` used for cost accounting.
pub type Chw = (usize, usize, usize);

/// A learnable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub data: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(data: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        Param { data, grad }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A differentiable image-to-image operation.
///
/// `forward` is the frozen (inference) path and never mutates the layer, so
/// a shared reference can be used concurrently. `forward_t` caches whatever
/// `backward` needs; `backward` consumes the cache, accumulates parameter
/// gradients into [`Param::grad`] and returns the gradient with respect to
/// the layer input.
pub trait Layer<F: Scalar>: Send + Sync {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F>;
    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F>;
    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F>;

    fn visit_params(&self, _f: &mut dyn FnMut(&Param<F>)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param<F>)) {}

    /// Re-draws all parameters from the layer's initialization scheme.
    fn reinit(&mut self, _rng: &mut ChaCha8Rng) {}

    /// Analytic multiply-accumulate count for one image of shape `input`,
    /// plus the output shape. Convolutions count `k^2*Cin*Cout*Hout*Wout`
    /// weight MACs and `Cout*Hout*Wout` bias adds; pooling, upsampling,
    /// normalization and activations count zero.
    fn cost(&self, input: Chw) -> (u64, Chw);
}

/// Total number of scalar parameters reachable from `layer`.
pub fn param_count<F: Scalar>(layer: &dyn Layer<F>) -> u64 {
    let mut n = 0u64;
    layer.visit_params(&mut |p| n += p.len() as u64);
    n
}

/// Clears all accumulated gradients.
pub fn zero_grads<F: Scalar>(layer: &mut dyn Layer<F>) {
    layer.visit_params_mut(&mut |p| p.grad.fill(F::zero()));
}

/// Rectified linear unit; the derivative at zero is taken to be zero.
pub struct Relu<F: Scalar> {
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> Relu<F> {
    pub fn new() -> Self {
        Relu { cache: None }
    }
}

impl<F: Scalar> Default for Relu<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Layer<F> for Relu<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.cache = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let x = self.cache.take().expect("Relu::backward without forward_t");
        let mut g = grad_out.clone();
        g.zip_mut_with(&x, |gv, &xv| {
            if xv <= F::zero() {
                *gv = F::zero();
            }
        });
        g
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        (0, input)
    }
}

/// Leaky rectifier with a fixed negative slope.
pub struct LeakyRelu<F: Scalar> {
    slope: F,
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu {
            slope: F::from_f64c(slope),
            cache: None,
        }
    }
}

impl<F: Scalar> Layer<F> for LeakyRelu<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let s = self.slope;
        x.mapv(|v| if v > F::zero() { v } else { v * s })
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.cache = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let x = self
            .cache
            .take()
            .expect("LeakyRelu::backward without forward_t");
        let s = self.slope;
        let mut g = grad_out.clone();
        g.zip_mut_with(&x, |gv, &xv| {
            if xv <= F::zero() {
                *gv *= s;
            }
        });
        g
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        (0, input)
    }
}

/// Layers applied one after another.
pub struct Seq<F: Scalar> {
    pub layers: Vec<Box<dyn Layer<F>>>,
}

impl<F: Scalar> Seq<F> {
    pub fn new(layers: Vec<Box<dyn Layer<F>>>) -> Self {
        Seq { layers }
    }
}

impl<F: Scalar> Layer<F> for Seq<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward_t(&h);
        }
        h
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }

    fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        for l in &mut self.layers {
            l.reinit(rng);
        }
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let mut macs = 0u64;
        let mut shape = input;
        for l in &self.layers {
            let (m, s) = l.cost(shape);
            macs += m;
            shape = s;
        }
        (macs, shape)
    }
}

/// `y = x + body(x)`; input and output shapes must match.
pub struct Residual<F: Scalar> {
    pub body: Seq<F>,
}

impl<F: Scalar> Residual<F> {
    pub fn new(body: Seq<F>) -> Self {
        Residual { body }
    }
}

impl<F: Scalar> Layer<F> for Residual<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut y = self.body.forward(x);
        y += x;
        y
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let mut y = self.body.forward_t(x);
        y += x;
        y
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let mut g = self.body.backward(grad_out);
        g += grad_out;
        g
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.body.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.body.visit_params_mut(f);
    }

    fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        self.body.reinit(rng);
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let (macs, out) = self.body.cost(input);
        assert_eq!(input, out, "residual body must preserve shape");
        (macs, out)
    }
}

/// Order-sensitive fingerprint of all parameter bits, for asserting that an
/// update path did not touch a network it must not touch.
pub fn param_fingerprint<F: Scalar>(layer: &dyn Layer<F>) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    layer.visit_params(&mut |p| {
        for v in p.data.iter() {
            let bits = v.to_f64().unwrap().to_bits();
            h ^= bits;
            h = h.wrapping_mul(0x100000001b3);
        }
    });
    h
}
