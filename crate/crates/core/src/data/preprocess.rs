//! Resizing and intensity normalization.

use super::pgm::Image;
use crate::error::{Error, Result};

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Result<Image> {
    if img.width == 0 || img.height == 0 || width == 0 || height == 0 {
        return Err(Error::Data(format!("cannot resize {}x{} to {width}x{height}", img.width, img.height)));
    }
    if (width, height) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(width, img.width);
    let ys = taps(height, img.height);
    let mut pixels = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
            let bottom = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
            pixels.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Image { width, height, pixels, normalized: img.normalized })
}

/// Resizes to `size x size` and maps `[0, 255]` onto `[-1, 1]`. Images
/// already normalized are only resized.
pub fn preprocess_image(img: &Image, size: usize) -> Result<Image> {
    let mut out = resize_bilinear(img, size, size)?;
    if !out.normalized {
        out.pixels.iter_mut().for_each(|p| *p = *p / 127.5 - 1.0);
        out.normalized = true;
    }
    Ok(out)
}
