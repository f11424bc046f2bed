//! Train, encode, cluster and score in one call.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{batch_views, preprocess, GlitchSample, Split};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, Points, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::metrics::{evaluate, ClusteringEvaluation, Partition};
use crate::model::Ctsae;
use crate::train::{train_loop, StepEvent, TrainConfig, TrainState};

pub fn prepare(samples: &[GlitchSample], size: usize) -> Result<Vec<GlitchSample>> {
    samples.iter().map(|s| preprocess(s, size)).collect()
}

/// Latent codes of `samples`, row-major `[n, latent_dim]`.
pub fn encode_samples(model: &mut Ctsae<f32>, samples: &[&GlitchSample], batch: usize) -> Result<Vec<f32>> {
    let durations = model.config().branch_durations.clone();
    let mut out = Vec::with_capacity(samples.len() * model.config().latent_dim);
    for chunk in samples.chunks(batch.max(1)) {
        let views = batch_views::<f32>(chunk, &durations)?;
        out.extend_from_slice(model.encode(&views)?.data());
    }
    Ok(out)
}

/// K-means on latent rows, scored against `labels`.
pub fn cluster_and_score(points: &Points, labels: &[usize], k: usize, seed: u64) -> Result<(Vec<usize>, ClusteringEvaluation)> {
    let km = kmeans(points, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let eval = evaluate(&Partition::new(labels)?, &km.assignments)?;
    Ok((km.labels, eval))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRun {
    pub seed: u64,
    pub epochs: usize,
    /// Validation loss of the selected model.
    pub recon_mse: f64,
    pub initial_val: f64,
    pub nmi: f64,
    pub ari: f64,
    pub ri: f64,
    pub seconds: f64,
}

/// Trains on `split.train`, selects on `split.val`, then clusters the
/// selected model's codes for `split.test` into as many groups as there
/// are true classes.
pub fn run_benchmark(
    samples: &[GlitchSample],
    split: &Split,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    on_step: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<BenchmarkRun> {
    let start = Instant::now();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let mut state = TrainState::<f32>::new(model_cfg.clone(), train_cfg.clone())?;
    let out = train_loop(&mut state, &train, &val, out_dir, on_step)?;
    let mut best = TrainState::<f32>::load(&out.best_path)?.model;
    let labels: Vec<usize> = test
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Data(format!("test sample {} has no label", s.id))))
        .collect::<Result<_>>()?;
    let k = Partition::new(&labels)?.k();
    let codes = encode_samples(&mut best, &test, train_cfg.batch_size)?;
    let points = Points::new(test.len(), model_cfg.latent_dim, codes.iter().map(|&v| f64::from(v)).collect())?;
    let (_, eval) = cluster_and_score(&points, &labels, k, train_cfg.seed)?;
    Ok(BenchmarkRun {
        seed: train_cfg.seed,
        epochs: train_cfg.epochs,
        recon_mse: out.best_val,
        initial_val: out.initial_val,
        nmi: eval.nmi,
        ari: eval.ari,
        ri: eval.ri,
        seconds: start.elapsed().as_secs_f64(),
    })
}
