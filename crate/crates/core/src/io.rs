//! Latent matrices and partition files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kmeans::Points;

/// `u64 n`, `u64 d`, then `n * d` little-endian `f32`, row-major.
pub fn write_latents(path: &Path, n: usize, d: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), n * d, "latent matrix size");
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_latents(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "latent file shorter than its header"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if n.checked_mul(d).and_then(|v| v.checked_mul(4)) != Some(body.len()) {
        return Err(Error::format(path, format!("header says {n}x{d} but body has {} bytes", body.len())));
    }
    Ok((n, d, body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
}

pub fn latents_to_points(n: usize, d: usize, values: &[f32]) -> Result<Points> {
    Points::new(n, d, values.iter().map(|&v| f64::from(v)).collect())
}

pub fn write_partition(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_partition(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| Error::format(path, format!("line {}: bad label {l:?}", i + 1))))
        .collect()
}
