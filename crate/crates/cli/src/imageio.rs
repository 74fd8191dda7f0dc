//! 8-bit RGB PNG in and out.

use codenet::synth::level_value;
use codenet::Tensor;
use image::{ImageBuffer, Rgb, RgbImage};
use std::path::Path;

/// Loads a PNG as RGB with samples `k` mapped to `level_value(k)`.
pub fn load_png(path: &Path) -> Result<Tensor, image::ImageError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, level_value(px[c]));
        }
    }
    Ok(t)
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8(t: &Tensor) -> RgbImage {
    let (_, h, w) = t.shape();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c| to_u8(t.at(c, y as usize, x as usize));
        Rgb([at(0), at(1), at(2)])
    })
}

/// Clamps to `[0, 1]` and rounds to the nearest level.
pub fn save_png(path: &Path, t: &Tensor) -> Result<(), image::ImageError> {
    to_rgb8(t).save_with_format(path, image::ImageFormat::Png)
}

/// Affine map `v -> (v - min) / (max - min)` taking the rain layer to
/// `[0, 1]`. A constant layer maps to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainMap {
    pub min: f64,
    pub max: f64,
}

impl RainMap {
    pub fn of(r: &Tensor) -> Self {
        let (min, max) = r
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        Self { min, max }
    }

    pub fn apply(&self, r: &Tensor) -> Tensor {
        let span = self.max - self.min;
        r.map(|v| if span > 0.0 { (v - self.min) / span } else { 0.0 })
    }
}
