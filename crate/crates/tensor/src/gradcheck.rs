//! Central finite-difference verification of analytic gradients.
//!
//! Always runs in `f64`: truncation error of a central difference is
//! `O(h^2)`, and single precision rounding would swamp it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ops::{BatchNormMode, RunningStats};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Denominator floor of the relative error, so that structurally zero
    /// gradients compare against rounding noise in absolute terms.
    pub floor: f64,
    /// Corrupt this op's backward rule in the analytic pass (negative control).
    pub corrupt: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { probes: 100, h: 1e-3, tolerance: 1e-5, seed: 0, floor: 1e-8, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    pub worst: Option<Probe>,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape's gradients of the scalar produced by `graph` against
/// central differences at `cfg.probes` randomly chosen input coordinates.
pub fn grad_check<F>(inputs: &[Tensor<f64>], graph: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    if let Some(kind) = cfg.corrupt {
        tape.corrupt_backward(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<usize> = if total <= cfg.probes {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, cfg.probes).into_vec()
    };

    let mut values = inputs.to_vec();
    let mut worst: Option<Probe> = None;
    for flat in coords {
        let (mut input, mut index) = (0, flat);
        while index >= values[input].numel() {
            index -= values[input].numel();
            input += 1;
        }
        let orig = values[input].data()[index];
        values[input].data_mut()[index] = orig + cfg.h;
        let plus = eval(&values)?;
        values[input].data_mut()[index] = orig - cfg.h;
        let minus = eval(&values)?;
        values[input].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let a = analytic[input][index];
        let rel_err = relative_error(a, numeric, cfg.floor);
        if worst.as_ref().is_none_or(|w| rel_err > w.rel_err || rel_err.is_nan()) {
            worst = Some(Probe { input, index, analytic: a, numeric, rel_err });
        }
    }
    let max_rel_err = worst.as_ref().map_or(0.0, |w| w.rel_err);
    let probes = cfg.probes.min(total);
    Ok(GradCheckReport { max_rel_err, probes, pass: max_rel_err < cfg.tolerance, worst })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero, for probing piecewise-linear ops.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Reduces an arbitrary output to a scalar by a fixed random weighting, so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(random(tape.shape(out), &mut rng));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// One named case of the op suite.
pub struct OpCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Gradient check of every differentiable op on small random tensors.
pub fn op_suite(cfg: &GradCheckConfig) -> Result<Vec<OpCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.seed;
    let mut cases = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        let report = grad_check(&inputs, |t, v| { let o = f(t, v)?; weighted_sum(t, o, s) }, cfg)?;
        cases.push(OpCase { name, report });
        Ok(())
    };

    run("add", vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", vec![random(&[5], &mut rng)], &|t, v| Ok(t.scale(v[0], -1.75)))?;
    run("relu", vec![away_from_zero(&[4, 5], &mut rng)], &|t, v| Ok(t.relu(v[0])))?;
    run("gelu", vec![random(&[4, 5], &mut rng)], &|t, v| Ok(t.gelu(v[0])))?;
    run("reshape", vec![random(&[2, 6], &mut rng)], &|t, v| t.reshape(v[0], &[3, 4]))?;
    run("permute", vec![random(&[2, 3, 4], &mut rng)], &|t, v| t.permute(v[0], &[2, 0, 1]))?;
    run("concat", vec![random(&[2, 1, 3], &mut rng), random(&[2, 2, 3], &mut rng)], &|t, v| t.concat(&[v[0], v[1]], 1))?;
    run("narrow", vec![random(&[2, 5, 3], &mut rng)], &|t, v| t.narrow(v[0], 1, 1, 3))?;
    run("repeat_leading", vec![random(&[1, 2, 3], &mut rng)], &|t, v| t.repeat_leading(v[0], 3))?;
    run("mean", vec![random(&[3, 3], &mut rng)], &|t, v| Ok(t.mean(v[0])))?;
    run("matmul", vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)], &|t, v| t.matmul(v[0], v[1]))?;
    run("matmul_shared", vec![random(&[2, 3, 4], &mut rng), random(&[4, 2], &mut rng)], &|t, v| t.matmul(v[0], v[1]))?;
    run("linear", vec![random(&[2, 3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng)], &|t, v| t.linear(v[0], v[1], Some(v[2])))?;
    run("softmax", vec![random(&[3, 6], &mut rng)], &|t, v| t.softmax(v[0]))?;
    run("layer_norm", vec![random(&[3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))?;
    run("batch_norm_train", vec![random(&[3, 2, 3, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)], &|t, v| {
        let mut stats = RunningStats::new(2);
        t.batch_norm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Train, 1e-5, 0.1)
    })?;
    run("batch_norm_eval", vec![random(&[2, 2, 2, 2], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)], &|t, v| {
        let mut stats = RunningStats { mean: vec![0.3, -0.2], var: vec![0.7, 1.9] };
        t.batch_norm2d(v[0], v[1], v[2], &mut stats, BatchNormMode::Eval, 1e-5, 0.1)
    })?;
    run("conv2d", vec![random(&[2, 2, 5, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1))?;
    run("conv2d_pointwise", vec![random(&[2, 3, 3, 3], &mut rng), random(&[2, 3, 1, 1], &mut rng), random(&[2], &mut rng)], &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0))?;
    run("conv_transpose2d", vec![random(&[2, 3, 3, 3], &mut rng), random(&[3, 2, 4, 4], &mut rng), random(&[2], &mut rng)], &|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1))?;
    run("conv_transpose2d_output_padding", vec![random(&[1, 2, 2, 2], &mut rng), random(&[2, 3, 3, 3], &mut rng), random(&[3], &mut rng)], &|t, v| t.conv_transpose2d_padded(v[0], v[1], Some(v[2]), 2, 1, 1))?;
    run("avg_pool2d", vec![random(&[2, 2, 6, 6], &mut rng)], &|t, v| t.avg_pool2d(v[0], 3, 3))?;
    run("upsample_nearest", vec![random(&[1, 2, 2, 3], &mut rng)], &|t, v| t.upsample_nearest(v[0], 2))?;
    run("mse_loss", vec![random(&[2, 5], &mut rng), random(&[2, 5], &mut rng)], &|t, v| t.mse_loss(v[0], v[1]))?;
    Ok(cases)
}
