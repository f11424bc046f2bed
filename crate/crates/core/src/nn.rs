//! Named parameter storage and the layers built on it.
//!
//! Layers only hold [`ParamId`]s, so one architecture value works for any
//! [`Scalar`] precision and two layers can alias the same weights.

use std::collections::HashMap;

use ctsae_tensor::{BatchNormMode, RunningStats, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::config::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Trainable tensors and batch-norm buffers, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), stat_names: Vec::new(), stats: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stat_names.push(name.into());
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&mut self.values)
    }

    pub fn stats(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.stat_names.iter().map(String::as_str).zip(&self.stats)
    }

    pub fn stats_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats<T>)> {
        self.stat_names.iter().map(String::as_str).zip(&mut self.stats)
    }

    /// Same parameters at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect();
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            stat_names: self.stat_names.clone(),
            stats: self.stats.iter().map(|s| RunningStats { mean: conv(&s.mean), var: conv(&s.var) }).collect(),
            index: self.index.clone(),
        }
    }

    /// Starts a forward pass. Parameters are copied onto the tape on first
    /// use; with `trainable` false they enter as constants.
    pub fn graph(&mut self, mode: BatchNormMode, trainable: bool) -> Graph<'_, T> {
        Graph {
            tape: Tape::new(),
            values: &self.values,
            vars: vec![None; self.values.len()],
            stats: &mut self.stats,
            mode,
            trainable,
        }
    }
}

/// One forward pass over a [`ParamStore`].
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    values: &'s [Tensor<T>],
    vars: Vec<Option<Var>>,
    stats: &'s mut [RunningStats<T>],
    pub mode: BatchNormMode,
    trainable: bool,
}

impl<T: Scalar> Graph<'_, T> {
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.values[id.0].clone();
        let v = if self.trainable { self.tape.param(value) } else { self.tape.constant(value) };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.shape(v).to_vec()
    }

    /// The tape plus, per parameter, the variable it was bound to.
    pub fn finish(self) -> (Tape<T>, Vec<Option<Var>>) {
        (self.tape, self.vars)
    }
}

fn fan_in_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Builds parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T, R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::ones(shape))
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = self.full_name(name);
        let t = Tensor::uniform(shape, bound, self.rng);
        self.store.add(n, t)
    }

    pub fn fan_in(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let n = self.full_name(name);
        let t = fan_in_uniform(shape, fan_in, self.rng);
        self.store.add(n, t)
    }

    pub fn stats(&mut self, name: &str, channels: usize) -> StatsId {
        let n = self.full_name(name);
        self.store.add_stats(n, channels)
    }
}

/// `y = x Wᵀ + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, inputs: usize, outputs: usize) -> Self {
        let mut s = b.scope(name);
        Linear { w: s.fan_in("w", vec![outputs, inputs], inputs), b: s.zeros("b", vec![outputs]), inputs, outputs }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.tape.linear(x, w, Some(b))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKind {
    Forward,
    Transposed { output_padding: usize },
}

/// 2-D convolution or transposed convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    kind: ConvKind,
}

impl Conv {
    /// Square `k x k` convolution, with a bias when `bias` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let w = s.fan_in("w", vec![cout, cin, k, k], cin * k * k);
        let b = bias.then(|| s.zeros("b", vec![cout]));
        Conv { w, b, stride, pad, kind: ConvKind::Forward }
    }

    /// Transposed convolution; weights are `[cin, cout, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn transposed<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        // Each output pixel sees about cin * (k / stride)^2 inputs.
        let fan_in = (cin * (k / stride).max(1).pow(2)).max(1);
        let w = s.fan_in("w", vec![cin, cout, k, k], fan_in);
        let b = bias.then(|| s.zeros("b", vec![cout]));
        Conv { w, b, stride, pad, kind: ConvKind::Transposed { output_padding: 0 } }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        Ok(match self.kind {
            ConvKind::Forward => g.tape.conv2d(x, w, b, self.stride, self.pad)?,
            ConvKind::Transposed { output_padding } => {
                g.tape.conv_transpose2d_padded(x, w, b, self.stride, self.pad, output_padding)?
            }
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        BatchNorm { gain: s.ones("gain", vec![channels]), shift: s.zeros("shift", vec![channels]), stats: s.stats("stats", channels) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, shift) = (g.param(self.gain), g.param(self.shift));
        let mode = g.mode;
        let stats = &mut g.stats[self.stats.0];
        Ok(g.tape.batch_norm2d(x, gain, shift, stats, mode, T::lit(NORM_EPS), T::lit(BN_MOMENTUM))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, width: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm { gain: s.ones("gain", vec![width]), shift: s.zeros("shift", vec![width]) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, shift) = (g.param(self.gain), g.param(self.shift));
        Ok(g.tape.layer_norm(x, gain, shift, T::lit(NORM_EPS))?)
    }
}

/// Multi-head scaled dot-product attention of `q [N,Lq,K]` over
/// `k, v [N,Lk,K]`, heads split along the embedding.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let (n, lq, width) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if width % heads != 0 || ks[2] != width || tape.shape(v) != ks.as_slice() {
        return Err(Error::Config(format!("attention shapes {qs:?} / {ks:?} with {heads} heads")));
    }
    let d = width / heads;
    let split = |tape: &mut Tape<T>, x: Var, l: usize| -> Result<Var> {
        let x = tape.reshape(x, &[n, l, heads, d])?;
        Ok(tape.permute(x, &[0, 2, 1, 3])?)
    };
    let qh = split(tape, q, lq)?;
    let kh = split(tape, k, lk)?;
    let vh = split(tape, v, lk)?;
    let kt = tape.transpose_last(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let weights = tape.softmax(scores)?;
    let out = tape.matmul(weights, vh)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    Ok(tape.reshape(out, &[n, lq, width])?)
}

/// Query/key/value projections, shared by aliasing the same ids.
#[derive(Debug, Clone, Copy)]
pub struct Qkv {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Qkv {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, width: usize) -> Self {
        let mut s = b.scope(name);
        Qkv { q: Linear::new(&mut s, "q", width, width), k: Linear::new(&mut s, "k", width, width), v: Linear::new(&mut s, "v", width, width) }
    }
}

/// Pre-norm transformer layer: `x + proj(mhsa(ln(x)))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub qkv: Qkv,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, width: usize, heads: usize, mlp_ratio: usize, qkv: Option<Qkv>) -> Self {
        let mut s = b.scope(name);
        let ln1 = LayerNorm::new(&mut s, "ln1", width);
        let qkv = qkv.unwrap_or_else(|| Qkv::new(&mut s, "qkv", width));
        TransformerLayer {
            ln1,
            qkv,
            proj: Linear::new(&mut s, "proj", width, width),
            ln2: LayerNorm::new(&mut s, "ln2", width),
            fc1: Linear::new(&mut s, "fc1", width, width * mlp_ratio),
            fc2: Linear::new(&mut s, "fc2", width * mlp_ratio, width),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let q = self.qkv.q.forward(g, h)?;
        let k = self.qkv.k.forward(g, h)?;
        let v = self.qkv.v.forward(g, h)?;
        let a = attention(&mut g.tape, q, k, v, self.heads)?;
        let a = self.proj.forward(g, a)?;
        let x = g.tape.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = self.fc2.forward(g, h)?;
        Ok(g.tape.add(x, h)?)
    }
}

/// 1x1 reduce, 3x3, 1x1 expand, each normalized, with a residual skip.
///
/// `scale > 1` shrinks the map in the 3x3 stage; `scale < -1` grows it by
/// `-scale` with transposed convolutions, in the 3x3 stage and the skip.
#[derive(Debug, Clone, Copy)]
pub struct Bottleneck {
    reduce: (Conv, BatchNorm),
    spatial: (Conv, BatchNorm),
    expand: (Conv, BatchNorm),
    skip: Option<(Conv, BatchNorm)>,
    act: Activation,
}

/// Spatial resampling performed by a [`Bottleneck`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Keep,
    Down(usize),
    Up(usize),
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, cin: usize, cout: usize, resample: Resample, act: Activation) -> Self {
        let mut s = b.scope(name);
        let mid = (cout / 4).max(4);
        let reduce = (Conv::new(&mut s, "reduce", cin, mid, 1, 1, 0, false), BatchNorm::new(&mut s, "reduce_bn", mid));
        let conv = match resample {
            Resample::Keep => Conv::new(&mut s, "spatial", mid, mid, 3, 1, 1, false),
            Resample::Down(r) => Conv::new(&mut s, "spatial", mid, mid, 3, r, 1, false),
            Resample::Up(r) => Conv::transposed(&mut s, "spatial", mid, mid, 2 * r, r, r / 2, false),
        };
        let spatial = (conv, BatchNorm::new(&mut s, "spatial_bn", mid));
        let expand = (Conv::new(&mut s, "expand", mid, cout, 1, 1, 0, false), BatchNorm::new(&mut s, "expand_bn", cout));
        let skip = match resample {
            Resample::Keep if cin == cout => None,
            Resample::Keep => Some(Conv::new(&mut s, "skip", cin, cout, 1, 1, 0, false)),
            Resample::Down(r) => Some(Conv::new(&mut s, "skip", cin, cout, 1, r, 0, false)),
            Resample::Up(r) => Some(Conv::transposed(&mut s, "skip", cin, cout, r, r, 0, false)),
        }
        .map(|c| (c, BatchNorm::new(&mut s, "skip_bn", cout)));
        Bottleneck { reduce, spatial, expand, skip, act }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let unit = |g: &mut Graph<'_, T>, (c, bn): (Conv, BatchNorm), x: Var| -> Result<Var> {
            let y = c.forward(g, x)?;
            bn.forward(g, y)
        };
        let h = unit(g, self.reduce, x)?;
        let h = activate(g, self.act, h);
        let h = unit(g, self.spatial, h)?;
        let h = activate(g, self.act, h);
        let h = unit(g, self.expand, h)?;
        let skip = match self.skip {
            Some(s) => unit(g, s, x)?,
            None => x,
        };
        let y = g.tape.add(h, skip)?;
        Ok(activate(g, self.act, y))
    }
}

pub fn activate<T: Scalar>(g: &mut Graph<'_, T>, act: Activation, x: Var) -> Var {
    match act {
        Activation::Relu => g.tape.relu(x),
        Activation::Gelu => g.tape.gelu(x),
    }
}
