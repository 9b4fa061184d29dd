//! Image datasets: a directory of PNG/JPEG files decoded to raw `[0, 1]`
//! planes, ordered by filename so sampling is reproducible.

use crate::nn::{Scalar, Tensor};
use crate::{Error, Result};
use ndarray::{Array3, Array4};
use std::path::{Path, PathBuf};

/// A raw RGB image, `(3, H, W)`, values in `[0, 1]`.
pub type RawImage = Array3<f32>;

pub struct ImageDataset {
    pub images: Vec<RawImage>,
    pub paths: Vec<PathBuf>,
}

impl ImageDataset {
    /// Loads every `.png`/`.jpg`/`.jpeg` in `dir` (non-recursive), sorted by
    /// filename.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Config(format!("cannot read dataset dir {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "dataset dir {} holds no images",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(files.len());
        for p in &files {
            images.push(load_image(p)?);
        }
        Ok(ImageDataset {
            images,
            paths: files,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off the last `holdout` images (by filename order) for
    /// evaluation; the front is the training pool.
    pub fn split(&self, holdout: usize) -> (&[RawImage], &[RawImage]) {
        let cut = self.len().saturating_sub(holdout);
        (&self.images[..cut], &self.images[cut..])
    }
}

/// Decodes one image file to `(3, H, W)` raw values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path)
        .map_err(|e| Error::Config(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Writes the first image of a raw `[0, 1]` batch as a lossless PNG.
pub fn save_png<F: Scalar>(path: &Path, raw: &Tensor<F>) -> Result<()> {
    let (h, w) = (raw.shape()[2], raw.shape()[3]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = raw[[0, c, y, x]].to_f64().unwrap().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// Raw `(3, H, W)` image to a 1-image batch of the given scalar type.
pub fn raw_to_batch<F: Scalar>(raw: &RawImage) -> Tensor<F> {
    let (c, h, w) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    let mut out = Array4::zeros((1, c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[0, ci, y, x]] = F::from_f64c(raw[[ci, y, x]] as f64);
            }
        }
    }
    out
}
