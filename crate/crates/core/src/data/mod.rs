//! Dataset ingestion, preprocessing, splitting and synthesis.

pub mod manifest;
pub mod pgm;
pub mod preprocess;
pub mod split;
pub mod synth;

use ctsae_tensor::{Scalar, Tensor};

pub use manifest::{load_dataset, read_manifest, write_manifest, GlitchSample, ManifestRow, Source};
pub use pgm::{read_pgm, write_pgm, Image};
pub use preprocess::{preprocess_image, resize_bilinear};
pub use split::{split_indices, Split, DEFAULT_FRACTIONS};
pub use synth::{synthesize, ClassKind, SynthSpec};

use crate::config::DURATIONS;
use crate::error::{Error, Result};

/// Resizes and normalizes every view of a sample.
pub fn preprocess(sample: &GlitchSample, size: usize) -> Result<GlitchSample> {
    let views = sample.views.iter().map(|v| preprocess_image(v, size)).collect::<Result<Vec<_>>>()?;
    Ok(GlitchSample { views, ..sample.clone() })
}

/// Position of each duration within a sample's views.
pub fn view_indices(durations: &[f32]) -> Result<Vec<usize>> {
    durations
        .iter()
        .map(|d| DURATIONS.iter().position(|x| x == d).ok_or_else(|| Error::Config(format!("unknown duration {d}"))))
        .collect()
}

/// Stacks the selected views of preprocessed samples into one
/// `[N, 1, S, S]` tensor per duration.
pub fn batch_views<T: Scalar>(samples: &[&GlitchSample], durations: &[f32]) -> Result<Vec<Tensor<T>>> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (w, h) = (first.views[0].width, first.views[0].height);
    let mut out = Vec::with_capacity(durations.len());
    for k in view_indices(durations)? {
        let mut data = Vec::with_capacity(samples.len() * w * h);
        for s in samples {
            let v = &s.views[k];
            if !v.normalized || (v.width, v.height) != (w, h) {
                return Err(Error::Data(format!("sample {} is not preprocessed to {w}x{h}", s.id)));
            }
            data.extend(v.pixels.iter().map(|&p| T::lit(f64::from(p))));
        }
        out.push(Tensor::from_vec([samples.len(), 1, h, w], data)?);
    }
    Ok(out)
}
