//! Gradient-synthesis heads: the constructions that turn a backbone's raw
//! output into a synthetic gradient field.
//!
//! Four variants are supported:
//!
//! * `direct` — the backbone output, scaled by `alpha`, is the gradient;
//! * `unconstrained_proxy` — the backbone output is a proxy target `P` and
//!   the gradient is the MSE gradient towards `P` with `P` held constant;
//! * `constrained_proxy` — like the above, but `P` is passed through a
//!   sigmoid followed by channel normalization and scaled by `beta`, which
//!   bounds the field and prevents divergence;
//! * `hybrid` — the backbone predicts a gradient, which is converted to a
//!   proxy via one implicit descent step `yhat - gamma * B(...)` and then
//!   constrained like `constrained_proxy`.
//!
//! The stop-gradient in the MSE-gradient identity is realized analytically:
//! `grad = alpha * 2/(C*H*W) * (yhat - P)` with `C*H*W` the per-image element
//! count, so no differentiation machinery is needed at inference time.

use crate::nn::{Scalar, Tensor};
use crate::teacher::Normalization;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which of the four gradient-synthesis constructions to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Direct,
    UnconstrainedProxy,
    ConstrainedProxy,
    Hybrid,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HeadKind::Direct => "direct",
            HeadKind::UnconstrainedProxy => "unconstrained_proxy",
            HeadKind::ConstrainedProxy => "constrained_proxy",
            HeadKind::Hybrid => "hybrid",
        };
        f.write_str(s)
    }
}

/// A head construction together with its fixed hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadVariant {
    pub kind: HeadKind,
    /// Output scale matching the backbone to the real gradient's magnitude.
    pub alpha: f64,
    /// Proxy range expansion; `>= 1` for constrained variants.
    pub beta: f64,
    /// Gradient scale of the hybrid's implicit descent step.
    pub gamma: f64,
}

impl HeadVariant {
    pub fn direct() -> Self {
        HeadVariant {
            kind: HeadKind::Direct,
            alpha: 1.0 / 512.0,
            beta: 1.0,
            gamma: 0.0,
        }
    }

    pub fn unconstrained_proxy() -> Self {
        HeadVariant {
            kind: HeadKind::UnconstrainedProxy,
            alpha: 40.0,
            beta: 1.0,
            gamma: 0.0,
        }
    }

    pub fn constrained_proxy() -> Self {
        HeadVariant {
            kind: HeadKind::ConstrainedProxy,
            alpha: 40.0,
            beta: 1.1,
            gamma: 0.0,
        }
    }

    pub fn hybrid() -> Self {
        HeadVariant {
            kind: HeadKind::Hybrid,
            alpha: 40.0,
            beta: 1.1,
            gamma: 1.0 / 512.0,
        }
    }

    pub fn with_kind(kind: HeadKind) -> Self {
        match kind {
            HeadKind::Direct => Self::direct(),
            HeadKind::UnconstrainedProxy => Self::unconstrained_proxy(),
            HeadKind::ConstrainedProxy => Self::constrained_proxy(),
            HeadKind::Hybrid => Self::hybrid(),
        }
    }

    /// Whether the construction produces a proxy target.
    pub fn has_proxy(&self) -> bool {
        !matches!(self.kind, HeadKind::Direct)
    }

    /// Whether the proxy target is bounded.
    pub fn is_constrained(&self) -> bool {
        matches!(self.kind, HeadKind::ConstrainedProxy | HeadKind::Hybrid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.is_constrained() && self.beta < 1.0 {
            return Err(Error::Config(format!(
                "beta must be >= 1 for constrained variants, got {}",
                self.beta
            )));
        }
        if self.kind == HeadKind::Hybrid && self.gamma <= 0.0 {
            return Err(Error::Config(format!(
                "gamma must be > 0 for the hybrid variant, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Per-channel bounds of a constrained proxy:
/// `[beta * (0 - mean_c) / std_c, beta * (1 - mean_c) / std_c]`.
/// The sigmoid approaches but never attains these.
pub fn proxy_bounds(beta: f64, norm: &Normalization) -> ([f64; 3], [f64; 3]) {
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for c in 0..3 {
        lo[c] = beta * (0.0 - norm.mean[c]) / norm.std[c];
        hi[c] = beta * (1.0 - norm.mean[c]) / norm.std[c];
    }
    (lo, hi)
}

/// The constraining map: sigmoid, then channel normalization, scaled by
/// `beta`. A total function of the raw tensor.
pub fn constrain<F: Scalar>(raw: &Tensor<F>, beta: f64, norm: &Normalization) -> Tensor<F> {
    let mut out = raw.clone();
    for c in 0..3 {
        let b = F::from_f64c(beta);
        let mean = F::from_f64c(norm.mean[c]);
        let std = F::from_f64c(norm.std[c]);
        out.index_axis_mut(ndarray::Axis(1), c)
            .mapv_inplace(|v| b * (sigmoid(v) - mean) / std);
    }
    out
}

/// Inverts the channel normalization part of [`constrain`], mapping a proxy
/// back to raw sigmoid space `[0, 1]` (not clipped): `(P/beta) * std + mean`.
pub fn proxy_to_raw<F: Scalar>(proxy: &Tensor<F>, beta: f64, norm: &Normalization) -> Tensor<F> {
    let mut out = proxy.clone();
    for c in 0..3 {
        let b = F::from_f64c(beta);
        let mean = F::from_f64c(norm.mean[c]);
        let std = F::from_f64c(norm.std[c]);
        out.index_axis_mut(ndarray::Axis(1), c)
            .mapv_inplace(|v| (v / b) * std + mean);
    }
    out
}

/// The MSE-gradient identity with the proxy held constant:
/// `alpha * 2/(C*H*W) * (yhat - P)`, where `C*H*W` is the per-image element
/// count.
pub fn grad_from_proxy<F: Scalar>(
    yhat: &Tensor<F>,
    proxy: &Tensor<F>,
    alpha: f64,
) -> Result<Tensor<F>> {
    if yhat.shape() != proxy.shape() {
        return Err(Error::Dimension(format!(
            "grad_from_proxy: shape {:?} vs {:?}",
            yhat.shape(),
            proxy.shape()
        )));
    }
    let (c, h, w) = (yhat.shape()[1], yhat.shape()[2], yhat.shape()[3]);
    let scale = F::from_f64c(alpha * 2.0 / (c * h * w) as f64);
    let mut g = yhat - proxy;
    g.mapv_inplace(|v| v * scale);
    Ok(g)
}

/// Turns a backbone output into a synthetic gradient (and, for proxy
/// variants, the proxy target itself).
pub fn synthesize<F: Scalar>(
    yhat: &Tensor<F>,
    _y: &Tensor<F>,
    backbone_out: &Tensor<F>,
    variant: &HeadVariant,
    norm: &Normalization,
) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
    if backbone_out.shape() != yhat.shape() {
        return Err(Error::Dimension(format!(
            "synthesize: backbone output shape {:?} vs image shape {:?}",
            backbone_out.shape(),
            yhat.shape()
        )));
    }
    variant.validate()?;
    match variant.kind {
        HeadKind::Direct => {
            let alpha = F::from_f64c(variant.alpha);
            Ok((backbone_out.mapv(|v| v * alpha), None))
        }
        HeadKind::UnconstrainedProxy => {
            let proxy = backbone_out.clone();
            let g = grad_from_proxy(yhat, &proxy, variant.alpha)?;
            Ok((g, Some(proxy)))
        }
        HeadKind::ConstrainedProxy => {
            let proxy = constrain(backbone_out, variant.beta, norm);
            let g = grad_from_proxy(yhat, &proxy, variant.alpha)?;
            Ok((g, Some(proxy)))
        }
        HeadKind::Hybrid => {
            let gamma = F::from_f64c(variant.gamma);
            let mut z = yhat.clone();
            z.zip_mut_with(backbone_out, |zv, &bv| *zv -= gamma * bv);
            let proxy = constrain(&z, variant.beta, norm);
            let g = grad_from_proxy(yhat, &proxy, variant.alpha)?;
            Ok((g, Some(proxy)))
        }
    }
}

/// Chains upstream gradients through the head to the backbone output.
///
/// `d_grad` is `dL/d(synthetic gradient)` and `d_proxy` is `dL/dP` (where
/// present); the returned tensor is `dL/d(backbone output)`. `yhat` is
/// treated as a constant, matching how the head is used in training.
pub fn backbone_grad<F: Scalar>(
    d_grad: &Tensor<F>,
    d_proxy: Option<&Tensor<F>>,
    yhat: &Tensor<F>,
    backbone_out: &Tensor<F>,
    variant: &HeadVariant,
    norm: &Normalization,
) -> Result<Tensor<F>> {
    let (c, h, w) = (yhat.shape()[1], yhat.shape()[2], yhat.shape()[3]);
    let mse_scale = F::from_f64c(variant.alpha * 2.0 / (c * h * w) as f64);
    let alpha = F::from_f64c(variant.alpha);

    match variant.kind {
        HeadKind::Direct => Ok(d_grad.mapv(|v| v * alpha)),
        HeadKind::UnconstrainedProxy | HeadKind::ConstrainedProxy | HeadKind::Hybrid => {
            // dL/dP_total = dL/dP - alpha * 2/(CHW) * dL/dg
            let mut dp = d_grad.mapv(|v| v * (-mse_scale));
            if let Some(extra) = d_proxy {
                dp += extra;
            }
            match variant.kind {
                HeadKind::UnconstrainedProxy => Ok(dp),
                HeadKind::ConstrainedProxy => {
                    // dP/db = beta * sigmoid'(b) / std_c
                    let mut out = dp;
                    for ci in 0..3 {
                        let scale = F::from_f64c(variant.beta / norm.std[ci]);
                        let mut oc = out.index_axis_mut(ndarray::Axis(1), ci);
                        let bc = backbone_out.index_axis(ndarray::Axis(1), ci);
                        ndarray::Zip::from(&mut oc).and(&bc).for_each(|o, &b| {
                            let s = sigmoid(b);
                            *o = *o * scale * s * (F::one() - s);
                        });
                    }
                    Ok(out)
                }
                HeadKind::Hybrid => {
                    // z = yhat - gamma*b; dP/db = -gamma * beta * sigmoid'(z) / std_c
                    let gamma = F::from_f64c(variant.gamma);
                    let mut out = dp;
                    for ci in 0..3 {
                        let scale = F::from_f64c(-variant.gamma * variant.beta / norm.std[ci]);
                        let _ = gamma;
                        let mut oc = out.index_axis_mut(ndarray::Axis(1), ci);
                        let bc = backbone_out.index_axis(ndarray::Axis(1), ci);
                        let yc = yhat.index_axis(ndarray::Axis(1), ci);
                        ndarray::Zip::from(&mut oc).and(&bc).and(&yc).for_each(
                            |o, &b, &yv| {
                                let z = yv - F::from_f64c(variant.gamma) * b;
                                let s = sigmoid(z);
                                *o = *o * scale * s * (F::one() - s);
                            },
                        );
                    }
                    Ok(out)
                }
                HeadKind::Direct => unreachable!(),
            }
        }
    }
}
