//! Average pooling and bilinear upsampling.

use super::{Chw, Layer, Scalar, Tensor};
use ndarray::Array4;

/// 2x2 average pooling with stride 2. Input height/width must be even.
pub struct AvgPool2d<F: Scalar> {
    cache_shape: Option<[usize; 4]>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> AvgPool2d<F> {
    pub fn new() -> Self {
        AvgPool2d {
            cache_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar> Default for AvgPool2d<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Stateless 2x2/stride-2 average pooling used by the frozen teacher.
pub fn avg_pool2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 requires even H, W (got {h}x{w})");
    let quarter = F::from_f64c(0.25);
    let mut out = Array4::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let s = x[[bi, ci, 2 * oy, 2 * ox]]
                        + x[[bi, ci, 2 * oy, 2 * ox + 1]]
                        + x[[bi, ci, 2 * oy + 1, 2 * ox]]
                        + x[[bi, ci, 2 * oy + 1, 2 * ox + 1]];
                    out[[bi, ci, oy, ox]] = s * quarter;
                }
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]: spreads each output gradient uniformly over its
/// 2x2 input window.
pub fn avg_pool2_backward<F: Scalar>(grad_out: &Tensor<F>) -> Tensor<F> {
    let (b, c, ho, wo) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    let quarter = F::from_f64c(0.25);
    let mut dx = Array4::zeros((b, c, ho * 2, wo * 2));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad_out[[bi, ci, oy, ox]] * quarter;
                    dx[[bi, ci, 2 * oy, 2 * ox]] = g;
                    dx[[bi, ci, 2 * oy, 2 * ox + 1]] = g;
                    dx[[bi, ci, 2 * oy + 1, 2 * ox]] = g;
                    dx[[bi, ci, 2 * oy + 1, 2 * ox + 1]] = g;
                }
            }
        }
    }
    dx
}

impl<F: Scalar> Layer<F> for AvgPool2d<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        avg_pool2(x)
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.cache_shape = Some([x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]]);
        avg_pool2(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        self.cache_shape.take().expect("AvgPool2d::backward without forward_t");
        avg_pool2_backward(grad_out)
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let (c, h, w) = input;
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even input, got {h}x{w}");
        (0, (c, h / 2, w / 2))
    }
}

/// Interpolation taps for one output axis at scale factor 2
/// (half-pixel-centred sampling, edges clamped).
fn bilinear_taps(out_len: usize) -> Vec<(usize, usize, f64)> {
    let in_len = out_len / 2;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let clamped = src.clamp(0.0, (in_len - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = clamped - i0 as f64;
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear upsampling by a factor of 2.
pub struct BilinearUp2<F: Scalar> {
    cache_shape: Option<[usize; 4]>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> BilinearUp2<F> {
    pub fn new() -> Self {
        BilinearUp2 {
            cache_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<F: Scalar> Default for BilinearUp2<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn bilinear_up2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h * 2, w * 2);
    let ty = bilinear_taps(ho);
    let tx = bilinear_taps(wo);
    let mut out = Array4::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let w00 = F::from_f64c((1.0 - wy) * (1.0 - wx));
                    let w01 = F::from_f64c((1.0 - wy) * wx);
                    let w10 = F::from_f64c(wy * (1.0 - wx));
                    let w11 = F::from_f64c(wy * wx);
                    out[[bi, ci, oy, ox]] = x[[bi, ci, y0, x0]] * w00
                        + x[[bi, ci, y0, x1]] * w01
                        + x[[bi, ci, y1, x0]] * w10
                        + x[[bi, ci, y1, x1]] * w11;
                }
            }
        }
    }
    out
}

pub fn bilinear_up2_backward<F: Scalar>(grad_out: &Tensor<F>, in_h: usize, in_w: usize) -> Tensor<F> {
    let (b, c, ho, wo) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    assert_eq!((ho, wo), (in_h * 2, in_w * 2));
    let ty = bilinear_taps(ho);
    let tx = bilinear_taps(wo);
    let mut dx = Array4::zeros((b, c, in_h, in_w));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let g = grad_out[[bi, ci, oy, ox]];
                    dx[[bi, ci, y0, x0]] += g * F::from_f64c((1.0 - wy) * (1.0 - wx));
                    dx[[bi, ci, y0, x1]] += g * F::from_f64c((1.0 - wy) * wx);
                    dx[[bi, ci, y1, x0]] += g * F::from_f64c(wy * (1.0 - wx));
                    dx[[bi, ci, y1, x1]] += g * F::from_f64c(wy * wx);
                }
            }
        }
    }
    dx
}

impl<F: Scalar> Layer<F> for BilinearUp2<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        bilinear_up2(x)
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.cache_shape = Some([x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]]);
        bilinear_up2(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let s = self
            .cache_shape
            .take()
            .expect("BilinearUp2::backward without forward_t");
        bilinear_up2_backward(grad_out, s[2], s[3])
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let (c, h, w) = input;
        (0, (c, h * 2, w * 2))
    }
}
