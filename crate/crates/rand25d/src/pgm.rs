//! 8-bit binary graymap (P5) export.

use std::path::Path;

use rand25d_core::geometry::Image;

use crate::error::{Error, Result};

/// Gray levels of `img`, row-major over `(b, c)`. With `normalize` the
/// values are min-max scaled (a constant image maps to 0); otherwise they
/// are clamped to `[0, 1]`. Levels are `round(255 v)`, halves away from zero.
pub fn gray_levels(img: &Image, normalize: bool) -> Vec<u8> {
    let data = img.data();
    let (lo, hi) = if normalize {
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        (lo, hi)
    } else {
        (0.0, 1.0)
    };
    let span = hi - lo;
    data.iter()
        .map(|&v| {
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
            (t * 255.0).round() as u8
        })
        .collect()
}

/// `P5\n<width> <height>\n255\n` followed by one byte per pixel; width is
/// the `c` extent and height the `b` extent.
pub fn encode_pgm(img: &Image, normalize: bool) -> Vec<u8> {
    let [h, w] = img.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(gray_levels(img, normalize));
    out
}

pub fn export_image(path: &Path, img: &Image, normalize: bool) -> Result<()> {
    std::fs::write(path, encode_pgm(img, normalize)).map_err(Error::io(path))
}
