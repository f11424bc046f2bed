//! Optimization against the summed per-view reconstruction loss.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ctsae_tensor::{BatchNormMode, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Table, Value};
use crate::config::ModelConfig;
use crate::data::{batch_views, GlitchSample};
use crate::error::{Error, Result};
use crate::model::{Ctsae, LossReport};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write `epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Loss curve file; `loss_curve.csv` in the output directory if unset.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 10,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.batch_size == 0 || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("batch_size and eps must be positive, weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

/// Optimizer constants, separable from [`TrainConfig`] for direct use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams { lr: c.learning_rate, beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam { m: zeros(), v: zeros(), step: 0 }
    }

    /// One bias-corrected update. Every parameter needs a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], p: AdamParams) -> Result<()> {
        if let Some(id) = store.ids().find(|id| grads.get(id.index()).is_none_or(Option::is_none)) {
            return Err(Error::Data(format!("no gradient for parameter {}", store.name(id))));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(p.beta1), T::lit(p.beta2));
        let c1 = T::one() - T::lit(p.beta1.powi(t));
        let c2 = T::one() - T::lit(p.beta2.powi(t));
        let (lr, eps, wd) = (T::lit(p.lr), T::lit(p.eps), T::lit(p.weight_decay));
        for (i, (_, param)) in store.iter_mut().enumerate() {
            let g = grads[i].as_ref().unwrap();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in param.data_mut().iter_mut().enumerate() {
                let gk = if p.weight_decay > 0.0 { g[k] + wd * *w } else { g[k] };
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *w -= step;
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: Ctsae<T>,
    pub adam: Adam<T>,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_cfg: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = Ctsae::new(model_cfg, train.seed)?;
        let adam = Adam::new(&model.params);
        Ok(TrainState { model, adam, train, epoch: 0, best_val: f64::INFINITY })
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        let json = |v: &dyn erased::Json| v.bytes();
        t.push("meta.model_config", Value::Bytes(json(self.model.config())));
        t.push("meta.train_config", Value::Bytes(json(&self.train)));
        for (name, p) in self.model.params.iter() {
            t.push_tensor(format!("param.{name}"), p);
        }
        for (name, s) in self.model.params.stats() {
            t.push_tensor(format!("stats.{name}.mean"), &Tensor::from_vec([s.mean.len()], s.mean.clone()).unwrap());
            t.push_tensor(format!("stats.{name}.var"), &Tensor::from_vec([s.var.len()], s.var.clone()).unwrap());
        }
        for (i, (name, p)) in self.model.params.iter().enumerate() {
            t.push_tensor(format!("adam.m.{name}"), &Tensor::from_vec(p.shape(), self.adam.m[i].clone()).unwrap());
            t.push_tensor(format!("adam.v.{name}"), &Tensor::from_vec(p.shape(), self.adam.v[i].clone()).unwrap());
        }
        t.push_f64("adam.step", self.adam.step as f64);
        t.push_f64("state.epoch", self.epoch as f64);
        t.push_f64("state.best_val", self.best_val);
        // Shuffling draws from stream `epoch` of a generator keyed by the
        // seed, so (seed, epoch) is the whole generator state.
        t.push_f64("state.rng_seed", self.train.seed as f64);
        t
    }

    pub fn from_table(t: &Table) -> Result<Self> {
        let model_cfg: ModelConfig = parse_json(t.bytes("meta.model_config")?)?;
        let train: TrainConfig = parse_json(t.bytes("meta.train_config")?)?;
        let mut model = Ctsae::<T>::new(model_cfg, 0)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (name, (_, p)) in names.iter().zip(model.params.iter_mut()) {
            let v = t.tensor::<T>(&format!("param.{name}"))?;
            if v.shape() != p.shape() {
                return Err(Error::Data(format!("checkpoint tensor {name} has shape {:?}, model expects {:?}", v.shape(), p.shape())));
            }
            *p = v;
        }
        for (name, s) in model.params.stats_mut() {
            s.mean = t.tensor::<T>(&format!("stats.{name}.mean"))?.into_data();
            s.var = t.tensor::<T>(&format!("stats.{name}.var"))?.into_data();
        }
        let mut adam = Adam::new(&model.params);
        for (i, name) in names.iter().enumerate() {
            adam.m[i] = t.tensor::<T>(&format!("adam.m.{name}"))?.into_data();
            adam.v[i] = t.tensor::<T>(&format!("adam.v.{name}"))?.into_data();
        }
        adam.step = t.f64("adam.step")? as u64;
        let epoch = t.f64("state.epoch")? as usize;
        let best_val = t.f64("state.best_val")?;
        Ok(TrainState { model, adam, train, epoch, best_val })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&Table::load(path)?).map_err(|e| match e {
            Error::Data(msg) => Error::format(path, msg),
            e => e,
        })
    }
}

mod erased {
    pub trait Json {
        fn bytes(&self) -> Vec<u8>;
    }

    impl<S: serde::Serialize> Json for S {
        fn bytes(&self) -> Vec<u8> {
            serde_json::to_vec(self).expect("config serializes")
        }
    }
}

fn parse_json<D: serde::de::DeserializeOwned>(b: &[u8]) -> Result<D> {
    serde_json::from_slice(b).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))
}

/// Forward, backward and one optimizer step. Returns the pre-step loss.
pub fn train_step<T: Scalar>(model: &mut Ctsae<T>, adam: &mut Adam<T>, p: AdamParams, views: &[Tensor<T>]) -> Result<LossReport> {
    let (report, grads) = model.loss_and_grads(views)?;
    if !report.total.is_finite() || !report.objective.is_finite() {
        return Err(Error::Divergence { epoch: 0, step: adam.step as usize + 1, detail: format!("loss {}", report.total) });
    }
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        let id = model.params.ids().nth(i).unwrap();
        let detail = format!("non-finite gradient for {}", model.params.name(id));
        return Err(Error::Divergence { epoch: 0, step: adam.step as usize + 1, detail });
    }
    adam.update(&mut model.params, &grads, p)?;
    Ok(report)
}

/// Sample-weighted mean loss over `samples`, with running statistics.
pub fn mean_loss<T: Scalar>(model: &mut Ctsae<T>, samples: &[&GlitchSample], batch: usize) -> Result<f64> {
    let durations = model.config().branch_durations.clone();
    let mut sum = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let views = batch_views::<T>(chunk, &durations)?;
        sum += model.loss(&views, BatchNormMode::Eval)?.total * chunk.len() as f64;
    }
    Ok(sum / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

impl CurveRow {
    pub fn line(&self) -> String {
        format!("{},{},{}", self.epoch, self.train, self.val)
    }
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let parse = || -> Option<CurveRow> {
                Some(CurveRow { epoch: f.first()?.parse().ok()?, train: f.get(1)?.parse().ok()?, val: f.get(2)?.parse().ok()? })
            };
            parse().filter(|_| f.len() == 3).ok_or_else(|| Error::format(path, format!("bad curve row {l:?}")))
        })
        .collect()
}

/// Per-step notification from [`train_loop`].
#[derive(Debug, Clone)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub report: &'a LossReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub curve: Vec<CurveRow>,
    /// Validation loss before the first step of this invocation.
    pub initial_val: f64,
    pub best_val: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub steps: usize,
}

pub fn best_path(out_dir: &Path) -> PathBuf {
    out_dir.join("best.ckpt")
}

pub fn last_path(out_dir: &Path) -> PathBuf {
    out_dir.join("last.ckpt")
}

fn ensure_writable(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let probe = out_dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Trains from `state.epoch + 1` through `state.train.epochs`.
///
/// After every epoch the curve gets one row and `last.ckpt` is rewritten;
/// `best.ckpt` follows the lowest validation loss (training loss when there
/// is no validation data).
pub fn train_loop(
    state: &mut TrainState<f32>,
    train: &[&GlitchSample],
    val: &[&GlitchSample],
    out_dir: &Path,
    on_step: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<RunOutput> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    ensure_writable(out_dir)?;
    let log = state.train.log_path.clone().unwrap_or_else(|| out_dir.join("loss_curve.csv"));
    if state.epoch == 0 {
        fs::write(&log, b"").map_err(|e| Error::io(&log, e))?;
    }
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log).map_err(|e| Error::io(&log, e))?;

    let cfg = state.train.clone();
    let p = AdamParams::from(&cfg);
    let durations = state.model.config().branch_durations.clone();
    let selection = if val.is_empty() { train } else { val };
    let initial_val = mean_loss(&mut state.model, selection, cfg.batch_size)?;
    let (best, last) = (best_path(out_dir), last_path(out_dir));
    let mut curve = Vec::new();
    let mut steps = 0;

    for epoch in state.epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&GlitchSample> = chunk.iter().map(|&i| train[i]).collect();
            let views = batch_views::<f32>(&batch, &durations)?;
            let report = train_step(&mut state.model, &mut state.adam, p, &views).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { epoch, step: step + 1, detail },
                e => e,
            })?;
            on_step(&StepEvent { epoch, step: step + 1, report: &report });
            sum += report.total * batch.len() as f64;
            steps += 1;
        }
        let train_l = sum / train.len() as f64;
        let val_l = if val.is_empty() { train_l } else { mean_loss(&mut state.model, val, cfg.batch_size)? };
        if !val_l.is_finite() {
            return Err(Error::Divergence { epoch, step: 0, detail: format!("validation loss {val_l}") });
        }
        let row = CurveRow { epoch, train: train_l, val: val_l };
        writeln!(log_file, "{}", row.line()).map_err(|e| Error::io(&log, e))?;
        curve.push(row);
        state.epoch = epoch;
        if val_l < state.best_val {
            state.best_val = val_l;
            state.save(&best)?;
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            state.save(&out_dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
        state.save(&last)?;
    }
    if !best.exists() {
        state.save(&best)?;
    }
    Ok(RunOutput { curve, initial_val, best_val: state.best_val, best_path: best, last_path: last, steps })
}
