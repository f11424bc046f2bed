//! Synthetic multi-duration spectrograms.
//!
//! Each sample starts as a 4 s master raster, `S` rows by `8S` columns,
//! with the glitch near the centre. Every shorter view is the central
//! crop of the master for its duration, box-averaged back to `S` columns,
//! so all four views agree on what they share.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::manifest::{write_manifest, ManifestRow};
use super::pgm::write_pgm;
use crate::config::DURATIONS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    /// A track rising in frequency into the centre.
    Chirp,
    /// A short, compact blob.
    Blip,
    /// A constant-frequency stripe across the whole window.
    Line,
    /// Repeating low-frequency arches.
    Scattered,
}

impl ClassKind {
    pub const ALL: [ClassKind; 4] = [ClassKind::Chirp, ClassKind::Blip, ClassKind::Line, ClassKind::Scattered];

    pub fn name(self) -> &'static str {
        match self {
            ClassKind::Chirp => "chirp",
            ClassKind::Blip => "blip",
            ClassKind::Line => "line",
            ClassKind::Scattered => "scattered",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassKind>,
    pub samples_per_class: usize,
    /// Standard deviation of additive Gaussian noise, in intensity units
    /// where the background sits at 0.15 and peaks reach about 1.
    pub noise: f32,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: ClassKind::ALL.to_vec(), samples_per_class: 200, noise: 0.05, image_size: 64, seed: 0 }
    }
}

const BACKGROUND: f32 = 0.15;

/// A 4 s master raster and its four views, intensities unclamped.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub size: usize,
    pub master: Vec<f32>,
    pub views: Vec<Vec<f32>>,
}

fn gauss(d: f32, width: f32) -> f32 {
    (-0.5 * (d / width).powi(2)).exp()
}

/// Intensity of `kind` at time `t` (seconds, 0..4) and normalized
/// frequency `f` (0 bottom, 1 top). Parameters are drawn once per sample.
enum Template {
    Chirp { end: f32, dur: f32, f0: f32, f1: f32, amp: f32 },
    Blip { t0: f32, st: f32, f0: f32, sf: f32, amp: f32 },
    Line { f0: f32, amp: f32 },
    Scattered { period: f32, phase: f32, base: f32, height: f32, amp: f32 },
}

impl Template {
    fn draw(kind: ClassKind, rng: &mut impl Rng) -> Self {
        match kind {
            ClassKind::Chirp => Template::Chirp {
                end: 2.0 + rng.random_range(-0.04..0.04),
                dur: rng.random_range(0.25..0.6),
                f0: rng.random_range(0.05..0.15),
                f1: rng.random_range(0.55..0.8),
                amp: rng.random_range(0.8..1.0),
            },
            ClassKind::Blip => Template::Blip {
                t0: 2.0 + rng.random_range(-0.03..0.03),
                st: rng.random_range(0.01..0.025),
                f0: rng.random_range(0.3..0.5),
                sf: rng.random_range(0.08..0.14),
                amp: rng.random_range(0.8..1.0),
            },
            ClassKind::Line => Template::Line { f0: rng.random_range(0.55..0.8), amp: rng.random_range(0.55..0.8) },
            ClassKind::Scattered => Template::Scattered {
                period: rng.random_range(0.6..1.2),
                phase: rng.random_range(0.0..1.0),
                base: rng.random_range(0.03..0.06),
                height: rng.random_range(0.1..0.2),
                amp: rng.random_range(0.55..0.8),
            },
        }
    }

    fn at(&self, t: f32, f: f32) -> f32 {
        match *self {
            Template::Chirp { end, dur, f0, f1, amp } => {
                let u = (t - (end - dur)) / dur;
                if !(0.0..=1.0).contains(&u) {
                    return 0.0;
                }
                let track = f0 + (f1 - f0) * u * u;
                amp * (0.3 + 0.7 * u) * gauss(f - track, 0.02)
            }
            Template::Blip { t0, st, f0, sf, amp } => amp * gauss(t - t0, st) * gauss(f - f0, sf),
            Template::Line { f0, amp } => amp * gauss(f - f0, 0.015),
            Template::Scattered { period, phase, base, height, amp } => {
                let arch = base + height * (PI * (t / period - phase)).sin().abs();
                amp * (gauss(f - arch, 0.025) + 0.5 * gauss(f - 2.0 * arch, 0.025))
            }
        }
    }
}

/// Column range of the master covered by a view of `duration` seconds.
pub fn view_columns(size: usize, duration: f32) -> std::ops::Range<usize> {
    let total = 8 * size;
    let width = (total as f32 * duration / 4.0).round() as usize;
    let start = (total - width) / 2;
    start..start + width
}

/// Central crop of an `S x 8S` master for `duration`, averaged over
/// column groups back to `S` columns.
pub fn crop_view(master: &[f32], size: usize, duration: f32) -> Vec<f32> {
    let cols = view_columns(size, duration);
    let group = cols.len() / size;
    let stride = 8 * size;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let start = r * stride + cols.start + c * group;
            out[r * size + c] = master[start..start + group].iter().sum::<f32>() / group as f32;
        }
    }
    out
}

/// Renders sample `index` of class `kind`. The stream is fixed by
/// `(seed, index)`, so samples can be generated in any order.
pub fn render(kind: ClassKind, size: usize, noise: f32, seed: u64, index: u64) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let template = Template::draw(kind, &mut rng);
    let width = 8 * size;
    let normal = Normal::new(0.0f32, noise.max(0.0)).expect("finite noise level");
    let mut master = vec![0.0; size * width];
    for r in 0..size {
        let f = 1.0 - (r as f32 + 0.5) / size as f32;
        for c in 0..width {
            let t = (c as f32 + 0.5) * 4.0 / width as f32;
            let n = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            master[r * width + c] = BACKGROUND + template.at(t, f) + n;
        }
    }
    let views = DURATIONS.iter().map(|&d| crop_view(&master, size, d)).collect();
    Rendered { size, master, views }
}

pub fn quantize(v: &[f32]) -> Vec<u8> {
    v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn duration_tag(d: f32) -> String {
    format!("{d:.1}")
}

/// Writes `out_dir/images/*.pgm` and `out_dir/manifest.csv`. Sample `i`
/// belongs to class `i mod classes`.
pub fn synthesize(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    if spec.image_size < 16 {
        return Err(Error::Config(format!("image size {} is below the minimum of 16", spec.image_size)));
    }
    if spec.classes.is_empty() {
        return Err(Error::Config("no classes to synthesize".into()));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let total = spec.classes.len() * spec.samples_per_class;
    let rows = (0..total)
        .into_par_iter()
        .map(|i| {
            let label = i % spec.classes.len();
            let r = render(spec.classes[label], spec.image_size, spec.noise, spec.seed, i as u64);
            let id = format!("syn{i:05}");
            let mut paths: [PathBuf; 4] = Default::default();
            for (k, (view, &d)) in r.views.iter().zip(&DURATIONS).enumerate() {
                let p = images.join(format!("{id}_{}.pgm", duration_tag(d)));
                write_pgm(&p, spec.image_size, spec.image_size, &quantize(view))?;
                paths[k] = p;
            }
            Ok(ManifestRow { id, label: Some(label), paths })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}
