//! Deterministic train/validation/test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sample indices of each split; each list is sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `labels.len()` samples. Validation and test sizes are floored
/// and the remainder goes to training; with labels present this happens
/// per class, so every split stays balanced.
pub fn split_indices(labels: &[Option<usize>], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (tr, va, te) = fractions;
    if [tr, va, te].iter().any(|f| !(0.0..=1.0).contains(f)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    let stratify = labels.iter().all(Option::is_some);
    for (i, l) in labels.iter().enumerate() {
        groups.entry(if stratify { *l } else { None }).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for mut members in groups.into_values() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_val = (va * n + 1e-9).floor() as usize;
        let n_test = (te * n + 1e-9).floor() as usize;
        split.val.extend_from_slice(&members[..n_val]);
        split.test.extend_from_slice(&members[n_val..n_val + n_test]);
        split.train.extend_from_slice(&members[n_val + n_test..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.7, 0.1, 0.2);
