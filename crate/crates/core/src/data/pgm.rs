//! Binary greyscale PGM (`P5`) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A greyscale raster, row-major, values as read (0..=255 for raw images).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    /// Set once values have been mapped to `[-1, 1]`.
    pub normalized: bool,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count");
        Image { width, height, pixels, normalized: false }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

fn header_fields(bytes: &[u8]) -> Option<([usize; 3], usize)> {
    let mut fields = [0usize; 3];
    let mut pos = 2;
    for field in &mut fields {
        loop {
            match bytes.get(pos)? {
                b'#' => {
                    while *bytes.get(pos)? != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos)?.is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    bytes.get(pos)?.is_ascii_whitespace().then_some((fields, pos + 1))
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    if !bytes.starts_with(b"P5") {
        return Err("not a binary PGM (P5) file".into());
    }
    let ([width, height, maxval], start) = header_fields(bytes).ok_or("malformed PGM header")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err(format!("degenerate {width}x{height} image"));
    }
    let raster = &bytes[start..];
    if raster.len() < width * height {
        return Err(format!("truncated raster: {} of {} bytes", raster.len(), width * height));
    }
    let pixels = raster[..width * height].iter().map(|&b| f32::from(b)).collect();
    Ok(Image::new(width, height, pixels))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let mut bytes = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 253, 254, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.at(2, 1), 255.0);
        let again = decode_pgm(&encode_pgm(3, 2, &[0, 1, 2, 253, 254, 255])).unwrap();
        assert_eq!(again, img);
    }

    #[test]
    fn rejects_truncated_and_wrong_maxval() {
        let short = encode_pgm(4, 4, &[7; 10]);
        assert!(decode_pgm(&short).unwrap_err().contains("truncated"));
        assert!(decode_pgm(b"P5 2 2 65535\n\0\0\0\0\0\0\0\0").is_err());
        assert!(decode_pgm(b"P2 2 2 255\n1 2 3 4").is_err());
    }
}
