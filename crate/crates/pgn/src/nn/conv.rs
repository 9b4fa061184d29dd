//! 2-D convolutions via im2col + GEMM, with depthwise variants.

use super::{Chw, Layer, Param, Scalar, Tensor};
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Zip};
use rand_chacha::ChaCha8Rng;

/// Output spatial size of a convolution with square kernel `k`.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= k,
        "input {input} too small for kernel {k} with pad {pad}"
    );
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds `x` (C, H, W) into a `(C*k*k, Ho*Wo)` patch matrix.
/// Out-of-range taps (from padding) stay zero.
pub fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut Array2<F>,
) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(col.shape(), [c_in * k * k, ho * wo]);
    col.fill(F::zero());
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut col_row = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    // valid ox range: 0 <= ox*stride + kj - pad < w
                    let (ox_lo, ox_hi) = valid_range(wo, stride, kj, pad, w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = (ox_lo * stride + kj) as isize - pad as isize;
                    let src = x.slice(s![
                        c,
                        iy as usize,
                        ix_lo as usize..;stride
                    ]);
                    let n = ox_hi - ox_lo;
                    col_row
                        .slice_mut(s![oy * wo + ox_lo..oy * wo + ox_hi])
                        .assign(&src.slice(s![..n]));
                }
            }
        }
    }
}

/// Folds a `(C*k*k, Ho*Wo)` patch-gradient matrix back into `dx` (C, H, W),
/// accumulating overlapping contributions.
pub fn col2im<F: Scalar>(
    dcol: &ArrayView2<F>,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut ArrayViewMut3<F>,
) {
    let (c_in, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(dcol.shape(), [c_in * k * k, ho * wo]);
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dcol_row = dcol.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(wo, stride, kj, pad, w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix_lo = (ox_lo * stride + kj) as isize - pad as isize;
                    let n = ox_hi - ox_lo;
                    let mut dst = dx.slice_mut(s![
                        c,
                        iy as usize,
                        ix_lo as usize..;stride
                    ]);
                    Zip::from(dst.slice_mut(s![..n]))
                        .and(dcol_row.slice(s![oy * wo + ox_lo..oy * wo + ox_hi]))
                        .for_each(|d, &g| *d += g);
                }
            }
        }
    }
}

fn valid_range(wo: usize, stride: usize, kj: usize, pad: usize, w: usize) -> (usize, usize) {
    // smallest ox with ox*stride + kj - pad >= 0
    let lo = pad.saturating_sub(kj).div_ceil(stride);
    // smallest ox with ox*stride + kj - pad >= w
    let hi = if w + pad > kj {
        ((w + pad - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(wo), hi)
}

/// Stateless convolution forward used by both the [`Conv2d`] layer and the
/// frozen teacher. `weight` is `(out, in, k, k)`, `bias` optional `(out,)`.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    weight: &ArrayView2<F>, // (out, in*k*k)
    bias: Option<&Array1<F>>,
    c_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (b, cx, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(cx, c_in, "conv input channels: expected {c_in}, got {cx}");
    let c_out = weight.shape()[0];
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut out = Array4::zeros((b, c_out, ho, wo));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut out_b, x_b)| {
            let mut col = Array2::zeros((c_in * k * k, ho * wo));
            im2col(&x_b, k, stride, pad, &mut col);
            let mut out_mat = Array2::zeros((c_out, ho * wo));
            ndarray::linalg::general_mat_mul(F::one(), weight, &col, F::zero(), &mut out_mat);
            if let Some(bias) = bias {
                for (mut row, &bv) in out_mat.rows_mut().into_iter().zip(bias.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
            out_b.assign(
                &out_mat
                    .into_shape_with_order((c_out, ho, wo))
                    .expect("conv output reshape"),
            );
        });
    out
}

/// Gradient of a convolution with respect to its input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad<F: Scalar>(
    grad_out: &Tensor<F>,
    weight: &ArrayView2<F>, // (out, in*k*k)
    c_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Tensor<F> {
    let (b, c_out, ho, wo) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    assert_eq!(c_out, weight.shape()[0]);
    let mut dx = Array4::zeros((b, c_in, in_h, in_w));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(grad_out.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut dx_b, g_b)| {
            let g_mat = g_b
                .into_shape_with_order((c_out, ho * wo))
                .expect("grad reshape");
            let mut dcol = Array2::zeros((c_in * k * k, ho * wo));
            ndarray::linalg::general_mat_mul(F::one(), &weight.t(), &g_mat, F::zero(), &mut dcol);
            col2im(&dcol.view(), k, stride, pad, &mut dx_b);
        });
    dx
}

/// Standard 2-D convolution with square kernel and zero padding.
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F>, // (out, in, k, k)
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Tensor<F>>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Param::new(
            super::init::he_normal::<F>(&[out_channels, in_channels, k, k], rng).into_dyn(),
        );
        let bias = bias.then(|| Param::new(ndarray::ArrayD::zeros(vec![out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            k,
            stride,
            pad,
            cache_x: None,
        }
    }

    fn weight_mat(&self) -> ArrayView2<'_, F> {
        self.weight
            .data
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.k * self.k))
            .expect("conv weight reshape")
    }

    fn bias_vec(&self) -> Option<Array1<F>> {
        self.bias.as_ref().map(|b| {
            b.data
                .view()
                .into_shape_with_order(self.out_channels)
                .expect("bias reshape")
                .to_owned()
        })
    }
}

impl<F: Scalar> Layer<F> for Conv2d<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        conv2d_forward(
            x,
            &self.weight_mat(),
            self.bias_vec().as_ref(),
            self.in_channels,
            self.k,
            self.stride,
            self.pad,
        )
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.cache_x = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let x = self
            .cache_x
            .take()
            .expect("Conv2d::backward without forward_t");
        let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, ho, wo) = (grad_out.shape()[1], grad_out.shape()[2], grad_out.shape()[3]);
        let (c_in, k) = (self.in_channels, self.k);

        // Per-image weight-gradient partials computed in parallel, then
        // reduced in batch order so results do not depend on scheduling.
        let partials: Vec<Array2<F>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let mut col = Array2::zeros((c_in * k * k, ho * wo));
                im2col(&x.index_axis(Axis(0), bi), k, self.stride, self.pad, &mut col);
                let g_mat = grad_out
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c_out, ho * wo))
                    .expect("grad reshape");
                let mut gw = Array2::zeros((c_out, c_in * k * k));
                ndarray::linalg::general_mat_mul(F::one(), &g_mat, &col.t(), F::zero(), &mut gw);
                gw
            })
            .collect();
        {
            let mut gw_acc = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((c_out, c_in * k * k))
                .expect("weight grad reshape");
            for gw in partials {
                gw_acc += &gw;
            }
        }
        if let Some(bias) = &mut self.bias {
            let mut gb = bias
                .grad
                .view_mut()
                .into_shape_with_order(c_out)
                .expect("bias grad reshape");
            for bi in 0..b {
                for c in 0..c_out {
                    gb[c] += grad_out.index_axis(Axis(0), bi).index_axis(Axis(0), c).sum();
                }
            }
        }

        conv2d_input_grad(
            grad_out,
            &self.weight_mat(),
            c_in,
            k,
            self.stride,
            self.pad,
            h,
            w,
        )
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        self.weight.data = super::init::he_normal::<F>(
            &[self.out_channels, self.in_channels, self.k, self.k],
            rng,
        )
        .into_dyn();
        self.weight.grad.fill(F::zero());
        if let Some(b) = &mut self.bias {
            b.data.fill(F::zero());
            b.grad.fill(F::zero());
        }
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let (c, h, w) = input;
        assert_eq!(c, self.in_channels, "cost: channel mismatch");
        let ho = conv_out_size(h, self.k, self.stride, self.pad);
        let wo = conv_out_size(w, self.k, self.stride, self.pad);
        let mut macs =
            (self.k * self.k * self.in_channels * self.out_channels * ho * wo) as u64;
        if self.bias.is_some() {
            macs += (self.out_channels * ho * wo) as u64;
        }
        (macs, (self.out_channels, ho, wo))
    }
}

/// Depthwise convolution: one `k x k` filter per channel.
pub struct DepthwiseConv2d<F: Scalar> {
    pub weight: Param<F>, // (c, k, k)
    pub bias: Option<Param<F>>,
    pub channels: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Tensor<F>>,
}

impl<F: Scalar> DepthwiseConv2d<F> {
    pub fn new(
        channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight =
            Param::new(super::init::he_normal::<F>(&[channels, k, k], rng).into_dyn());
        let bias = bias.then(|| Param::new(ndarray::ArrayD::zeros(vec![channels])));
        DepthwiseConv2d {
            weight,
            bias,
            channels,
            k,
            stride,
            pad,
            cache_x: None,
        }
    }
}

impl<F: Scalar> Layer<F> for DepthwiseConv2d<F> {
    fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(c, self.channels);
        let (k, stride, pad) = (self.k, self.stride, self.pad);
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(w, k, stride, pad);
        let mut out = Array4::zeros((b, c, ho, wo));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut out_b, x_b)| {
                for ci in 0..c {
                    let xc = x_b.index_axis(Axis(0), ci);
                    let wk = self.weight.data.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let wk = wk.index_axis(Axis(0), ci);
                    let bias = self
                        .bias
                        .as_ref()
                        .map(|bp| bp.data[[ci]])
                        .unwrap_or_else(F::zero);
                    let mut oc = out_b.index_axis_mut(Axis(0), ci);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bias;
                            for ki in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wk[[ki, kj]] * xc[[iy as usize, ix as usize]];
                                }
                            }
                            oc[[oy, ox]] = acc;
                        }
                    }
                }
            });
        out
    }

    fn forward_t(&mut self, x: &Tensor<F>) -> Tensor<F> {
        self.cache_x = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Tensor<F> {
        let x = self
            .cache_x
            .take()
            .expect("DepthwiseConv2d::backward without forward_t");
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, stride, pad) = (self.k, self.stride, self.pad);
        let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
        let mut dx = Array4::zeros((b, c, h, w));

        // weight/bias grads: sequential over batch for determinism
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let xc = x.index_axis(Axis(0), bi);
                    let xc = xc.index_axis(Axis(0), ci);
                    let gc = grad_out.index_axis(Axis(0), bi);
                    let gc = gc.index_axis(Axis(0), ci);
                    for ki in 0..k {
                        for kj in 0..k {
                            let mut acc = F::zero();
                            for oy in 0..ho {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += gc[[oy, ox]] * xc[[iy as usize, ix as usize]];
                                }
                            }
                            gw[[ci, ki, kj]] += acc;
                        }
                    }
                    if let Some(bias) = &mut self.bias {
                        bias.grad[[ci]] += gc.sum();
                    }
                }
            }
        }

        dx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(grad_out.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut dx_b, g_b)| {
                let wk_all = self
                    .weight
                    .data
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                for ci in 0..c {
                    let wk = wk_all.index_axis(Axis(0), ci);
                    let gc = g_b.index_axis(Axis(0), ci);
                    let mut dxc = dx_b.index_axis_mut(Axis(0), ci);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = gc[[oy, ox]];
                            for ki in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    dxc[[iy as usize, ix as usize]] += g * wk[[ki, kj]];
                                }
                            }
                        }
                    }
                }
            });
        dx
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        self.weight.data =
            super::init::he_normal::<F>(&[self.channels, self.k, self.k], rng).into_dyn();
        self.weight.grad.fill(F::zero());
        if let Some(b) = &mut self.bias {
            b.data.fill(F::zero());
            b.grad.fill(F::zero());
        }
    }

    fn cost(&self, input: Chw) -> (u64, Chw) {
        let (c, h, w) = input;
        assert_eq!(c, self.channels, "cost: channel mismatch");
        let ho = conv_out_size(h, self.k, self.stride, self.pad);
        let wo = conv_out_size(w, self.k, self.stride, self.pad);
        let mut macs = (self.k * self.k * c * ho * wo) as u64;
        if self.bias.is_some() {
            macs += (c * ho * wo) as u64;
        }
        (macs, (c, ho, wo))
    }
}
