//! Finite-difference checks of parameter gradients through [`Graph`]s.

use ctsae_tensor::gradcheck::{relative_error, GradCheckConfig, GradCheckReport, Probe};
use ctsae_tensor::{BatchNormMode, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Activation, BlockKind, FusionMode, ModelConfig};
use crate::error::Result;
use crate::model::Ctsae;
use crate::nn::{Graph, ParamStore};

/// Compares the analytic gradient of the scalar built by `loss` against
/// central differences at `cfg.probes` random parameter coordinates.
/// Batch norm runs on batch statistics throughout.
pub fn params_grad_check<F>(store: &mut ParamStore<f64>, loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = store.graph(BatchNormMode::Train, true);
        if let Some(kind) = cfg.corrupt {
            g.tape.corrupt_backward(kind);
        }
        let out = loss(&mut g)?;
        let (tape, bound) = g.finish();
        let grads = tape.backward(out)?;
        bound.iter().map(|v| v.map(|v| grads.get_or_zeros(&tape, v))).collect::<Vec<_>>()
    };
    let eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut g = store.graph(BatchNormMode::Train, false);
        let out = loss(&mut g)?;
        Ok(g.value(out).data()[0])
    };

    let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = rand::seq::index::sample(&mut rng, total, cfg.probes.min(total)).into_vec();
    let ids: Vec<_> = store.ids().collect();
    let mut worst: Option<Probe> = None;
    for flat in coords {
        let (mut input, mut index) = (0, flat);
        while index >= sizes[input] {
            index -= sizes[input];
            input += 1;
        }
        let id = ids[input];
        let orig = store.get(id).data()[index];
        store.get_mut(id).data_mut()[index] = orig + cfg.h;
        let plus = eval(store)?;
        store.get_mut(id).data_mut()[index] = orig - cfg.h;
        let minus = eval(store)?;
        store.get_mut(id).data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let a = analytic[input].as_ref().map_or(0.0, |g| g[index]);
        let rel_err = relative_error(a, numeric, cfg.floor);
        if worst.as_ref().is_none_or(|w| rel_err > w.rel_err || rel_err.is_nan()) {
            worst = Some(Probe { input, index, analytic: a, numeric, rel_err });
        }
    }
    let max_rel_err = worst.as_ref().map_or(0.0, |w| w.rel_err);
    Ok(GradCheckReport { max_rel_err, probes: cfg.probes.min(total), pass: max_rel_err < cfg.tolerance, worst })
}

/// [`params_grad_check`] of the training loss of a freshly initialized
/// model on a random batch of `batch` samples.
///
/// ReLU kinks make central differences unreliable once the network is
/// deep enough, so callers usually check a [`Activation::Gelu`] copy of
/// the configuration: every backward rule involved is the same.
pub fn model_grad_check(model_cfg: &ModelConfig, batch: usize, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let Ctsae { net, mut params } = Ctsae::<f64>::new(model_cfg.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let s = model_cfg.input_size;
    let views: Vec<Tensor<f64>> =
        (0..model_cfg.branches()).map(|_| Tensor::uniform(vec![batch, model_cfg.input_channels, s, s], 1.0, &mut rng)).collect();
    params_grad_check(
        &mut params,
        |g| {
            let vars: Vec<Var> = views.iter().map(|v| g.input(v.clone())).collect();
            Ok(net.forward_loss(g, &vars)?.total)
        },
        cfg,
    )
}

/// Settings for the end-to-end model check: a small step, and a floor
/// that absorbs rounding noise on gradients that are structurally zero
/// (biases feeding straight into batch norm).
pub fn model_check_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig { probes: 200, h: 3e-6, tolerance: 1e-4, seed, floor: 1e-4, corrupt: None }
}

/// Tiny Gelu copies of every architecture variant, named.
pub fn model_check_variants() -> Vec<(&'static str, ModelConfig)> {
    let tiny = ModelConfig { activation: Activation::Gelu, ..ModelConfig::tiny() };
    vec![
        ("cls_fusion", tiny.clone()),
        ("all_attention", tiny.clone().with_fusion(FusionMode::AllAttention)),
        ("none", tiny.clone().with_fusion(FusionMode::None)),
        ("cnn_only", tiny.clone().single_branch(BlockKind::CnnOnly)),
        ("vit_only", tiny.single_branch(BlockKind::VitOnly)),
    ]
}
