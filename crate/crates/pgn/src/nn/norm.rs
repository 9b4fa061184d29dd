//! Batch normalization.

use super::{Chw, Layer, Param, Scalar, Tensor};
use ndarray::{Array1, Array4, Axis};
use rand_chacha::ChaCha8Rng;

struct BnCache<F: Scalar> {
    xhat: Tensor<F>,
    inv_std: Array1<F>,
}

/// Per-channel batch normalization with affine parameters.
///
/// `forward_t` normalizes by batch statistics and updates running estimates;
/// `forward` uses the running estimates.
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    running_mean: Array1<F>,
    running_var: Array1<F>,
    channels: usize,
    momentum: F,
    eps: F,
    cache: Option<BnCache<F>>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ndarray::ArrayD::from_elem(vec![channels], F::one())),
            beta: Param::new(ndarray::ArrayD::zeros(vec![channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            channels,
            momentum: F::from_f64c(0.1),
            eps: F::from_f64c(1e-5),
            cache: None,
        }
    }
}

impl<F: Scalar> Layer<F> for BatchNorm2d<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(c, self.channels);
        let mut out = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let inv = (self.running_var[ci] + self.eps).sqrt().recip();
            let g = self.gamma.data[[ci]];
            let be = self.beta.data[[ci]];
            let m = self.running_mean[ci];
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        out[[bi, ci, y, xx]] = (x[[bi, ci, y, xx]] - m) * inv * g + be;
                    }
                }
            }
        }
        out
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(c, self.channels);
        let n = F::from_f64c((b * h * w) as f64);
        let mut xhat = Array4::zeros((b, c, h, w));
        let mut inv_std = Array1::zeros(c);
        let mut out = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let mean = ch.sum() / n;
            let mut var = F::zero();
            for &v in ch.iter() {
                let d = v - mean;
                var += d * d;
            }
            var /= n;
            let inv = (var + self.eps).sqrt().recip();
            inv_std[ci] = inv;
            // running stats use the unbiased variance estimate
            let count = (b * h * w) as f64;
            let unbiased = if count > 1.0 {
                var * F::from_f64c(count / (count - 1.0))
            } else {
                var
            };
            self.running_mean[ci] =
                self.running_mean[ci] * (F::one() - self.momentum) + mean * self.momentum;
            self.running_var[ci] =
                self.running_var[ci] * (F::one() - self.momentum) + unbiased * self.momentum;
            let g = self.gamma.data[[ci]];
            let be = self.beta.data[[ci]];
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (x[[bi, ci, y, xx]] - mean) * inv;
                        xhat[[bi, ci, y, xx]] = xh;
                        out[[bi, ci, y, xx]] = xh * g + be;
                    }
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std });
        out
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward without forward_t");
        let (b, c, h, w) = (
            grad_out.shape()[0],
            grad_out.shape()[1],
            grad_out.shape()[2],
            grad_out.shape()[3],
        );
        let n = F::from_f64c((b * h * w) as f64);
        let mut dx = Array4::zeros((b, c, h, w));
        for ci in 0..c {
            let mut sum_g = F::zero();
            let mut sum_g_xhat = F::zero();
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        let g = grad_out[[bi, ci, y, xx]];
                        sum_g += g;
                        sum_g_xhat += g * cache.xhat[[bi, ci, y, xx]];
                    }
                }
            }
            self.beta.grad[[ci]] += sum_g;
            self.gamma.grad[[ci]] += sum_g_xhat;
            let scale = self.gamma.data[[ci]] * cache.inv_std[ci] / n;
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        let g = grad_out[[bi, ci, y, xx]];
                        let xh = cache.xhat[[bi, ci, y, xx]];
                        dx[[bi, ci, y, xx]] = scale * (g * n - sum_g - xh * sum_g_xhat);
                    }
                }
            }
        }
        dx
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn reinit(&mut self, _rng: &mut ChaCha8Rng) {
        self.gamma.data.fill(F::one());
        self.gamma.grad.fill(F::zero());
        self.beta.data.fill(F::zero());
        self.beta.grad.fill(F::zero());
        self.running_mean.fill(F::zero());
        self.running_var.fill(F::one());
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        (0, input)
    }
}
