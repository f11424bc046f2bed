use crate::error::{invalid, mismatch, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Batch-norm statistics mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

impl<T: Scalar> Tape<T> {
    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Standardize over the last axis, then apply `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if self.shape(gain) != [k] || self.shape(shift) != [k] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        let kf = T::from_usize(k).unwrap();
        let (gd, sd) = (self.data(gain), self.data(shift));
        let src = self.data(x);
        let rows = src.len() / k;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * k..(r + 1) * k];
            let mean = row.iter().copied().sum::<T>() / kf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / kf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..k {
                let h = (row[j] - mean) * rs;
                xhat[r * k + j] = h;
                out[r * k + j] = h * gd[j] + sd[j];
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, xhat, rstd }, &[x, gain, shift]))
    }

    /// Per-channel normalization of an `[N, C, H, W]` tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
        eps: T,
        momentum: T,
    ) -> Result<Var> {
        self.check_rank("batch_norm2d", x, 4)?;
        let shape = self.shape(x).to_vec();
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        if self.shape(gain) != [c] || self.shape(shift) != [c] || stats.mean.len() != c {
            return Err(mismatch("batch_norm2d", &shape, self.shape(gain)));
        }
        let count = n * plane;
        if mode == BatchNormMode::Train && count < 2 {
            return Err(invalid("batch_norm2d", format!("need N*H*W >= 2 in train mode, got {count}")));
        }
        let src = self.data(x);
        let (gd, sd) = (self.data(gain), self.data(shift));
        let cf = T::from_usize(count).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); c];
        for ch in 0..c {
            let planes = || (0..n).map(move |b| (b * c + ch) * plane);
            let (mean, rs) = match mode {
                BatchNormMode::Train => {
                    let mut sum = T::zero();
                    for base in planes() {
                        sum += src[base..base + plane].iter().copied().sum::<T>();
                    }
                    let mean = sum / cf;
                    let mut sq = T::zero();
                    for base in planes() {
                        sq += src[base..base + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    let var = sq / cf;
                    let unbiased = sq / T::from_usize(count - 1).unwrap();
                    stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                    stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                    (mean, T::one() / (var + eps).sqrt())
                }
                BatchNormMode::Eval => (stats.mean[ch], T::one() / (stats.var[ch] + eps).sqrt()),
            };
            rstd[ch] = rs;
            for base in planes() {
                for i in base..base + plane {
                    let h = (src[i] - mean) * rs;
                    xhat[i] = h;
                    out[i] = h * gd[ch] + sd[ch];
                }
            }
        }
        let out = Tensor::from_vec(shape, out)?;
        let batch_stats = mode == BatchNormMode::Train;
        Ok(self.push(out, Op::BatchNorm { x, gain, shift, xhat, rstd, batch_stats }, &[x, gain, shift]))
    }
}

pub(crate) fn softmax_backward<T: Scalar>(tape: &Tape<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = tape.nodes[out].value.data();
    let d = *tape.nodes[out].value.shape().last().unwrap();
    let crate::tape::Op::Softmax(a) = tape.nodes[out].op else { unreachable!() };
    tape.accumulate(grads, a, |dx| {
        for ((dx, y), g) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
            let dot: T = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
            for j in 0..d {
                dx[j] += y[j] * (g[j] - dot);
            }
        }
    });
}

pub(crate) fn layer_norm_backward<T: Scalar>(tape: &Tape<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let Op::LayerNorm { x, gain, shift, xhat, rstd } = &tape.nodes[out].op else { unreachable!() };
    let k = tape.shape(*gain)[0];
    let kf = T::from_usize(k).unwrap();
    let gd = tape.data(*gain);
    tape.accumulate(grads, *x, |dx| {
        for (r, &rs) in rstd.iter().enumerate() {
            let span = r * k..(r + 1) * k;
            let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
            let mut sum_d = T::zero();
            let mut sum_dh = T::zero();
            for j in 0..k {
                let dh = gr[j] * gd[j];
                sum_d += dh;
                sum_dh += dh * hr[j];
            }
            let dxr = &mut dx[span];
            for j in 0..k {
                let dh = gr[j] * gd[j];
                dxr[j] += rs * (dh - sum_d / kf - hr[j] * sum_dh / kf);
            }
        }
    });
    tape.accumulate(grads, *gain, |dg| {
        for (gr, hr) in g.chunks(k).zip(xhat.chunks(k)) {
            for j in 0..k {
                dg[j] += gr[j] * hr[j];
            }
        }
    });
    tape.accumulate(grads, *shift, |ds| {
        for gr in g.chunks(k) {
            for j in 0..k {
                ds[j] += gr[j];
            }
        }
    });
}

pub(crate) fn batch_norm_backward<T: Scalar>(tape: &Tape<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let Op::BatchNorm { x, gain, shift, xhat, rstd, batch_stats } = &tape.nodes[out].op else { unreachable!() };
    let shape = tape.shape(*x);
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let cf = T::from_usize(n * plane).unwrap();
    let gd = tape.data(*gain);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gh = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                sum_g[ch] += g[i];
                sum_gh[ch] += g[i] * xhat[i];
            }
        }
    }
    tape.accumulate(grads, *x, |dx| {
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let scale = gd[ch] * rstd[ch];
                if *batch_stats {
                    let (mg, mgh) = (sum_g[ch] / cf, sum_gh[ch] / cf);
                    for i in base..base + plane {
                        dx[i] += scale * (g[i] - mg - xhat[i] * mgh);
                    }
                } else {
                    for i in base..base + plane {
                        dx[i] += scale * g[i];
                    }
                }
            }
        }
    });
    tape.accumulate(grads, *gain, |dg| dg.iter_mut().zip(&sum_gh).for_each(|(d, &s)| *d += s));
    tape.accumulate(grads, *shift, |ds| ds.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s));
}
