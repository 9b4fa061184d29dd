//! Training-time augmentation: random crop, resize, horizontal flip,
//! normalization.

use crate::data::RawImage;
use crate::nn::{Scalar, Tensor};
use crate::teacher::Normalization;
use ndarray::{s, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Smallest image side accepted by the augmentation pipeline.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Bilinear resize of one `(3, H, W)` plane set to `(3, out_h, out_w)`,
/// half-pixel-centred with edge clamping.
pub fn resize_bilinear<F: Scalar>(src: &Array3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let v = src[[ci, y0, x0]] * F::from_f64c((1.0 - wy) * (1.0 - wx))
                    + src[[ci, y0, x1]] * F::from_f64c((1.0 - wy) * wx)
                    + src[[ci, y1, x0]] * F::from_f64c(wy * (1.0 - wx))
                    + src[[ci, y1, x1]] * F::from_f64c(wy * wx);
                out[[ci, oy, ox]] = v;
            }
        }
    }
    out
}

/// Mirrors a batch along the width axis.
pub fn hflip<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.slice(s![.., .., .., ..;-1]).to_owned()
}

fn hflip3<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    x.slice(s![.., .., ..;-1]).to_owned()
}

/// Augmentation pipeline with a fixed output size.
#[derive(Debug, Clone)]
pub struct Augmentor {
    pub size: usize,
    /// Crop side as a fraction of the image's shorter side is drawn
    /// uniformly from `[min_scale, 1]`.
    pub min_scale: f64,
    pub norm: Normalization,
}

impl Augmentor {
    pub fn new(size: usize, norm: Normalization) -> Self {
        Augmentor {
            size,
            min_scale: 0.5,
            norm,
        }
    }

    /// Random square crop -> resize to `size` -> horizontal flip with
    /// probability 1/2 -> normalization. Draws from `rng` in a fixed order
    /// (crop side, offsets, flip), so a seeded RNG reproduces the batch.
    ///
    /// Returns `None` (with a warning) for images below [`MIN_IMAGE_SIDE`].
    pub fn augment<F: Scalar>(&self, img: &RawImage, rng: &mut ChaCha8Rng) -> Option<Array3<F>> {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let min_side = h.min(w);
        if min_side < MIN_IMAGE_SIDE {
            log::warn!("skipping undersized image ({h}x{w}), minimum side is {MIN_IMAGE_SIDE}");
            return None;
        }
        let scale = rng.gen_range(self.min_scale..=1.0);
        let side = ((min_side as f64 * scale).round() as usize).clamp(1, min_side);
        let oy = rng.gen_range(0..=(h - side));
        let ox = rng.gen_range(0..=(w - side));
        let flip = rng.gen_bool(0.5);

        let crop = img.slice(s![.., oy..oy + side, ox..ox + side]);
        let crop_f: Array3<F> = crop.mapv(|v| F::from_f64c(v as f64));
        let mut resized = resize_bilinear(&crop_f, self.size, self.size);
        if flip {
            resized = hflip3(&resized);
        }
        for c in 0..3 {
            let mean = F::from_f64c(self.norm.mean[c]);
            let std = F::from_f64c(self.norm.std[c]);
            resized
                .index_axis_mut(ndarray::Axis(0), c)
                .mapv_inplace(|v| (v - mean) / std);
        }
        Some(resized)
    }
}
