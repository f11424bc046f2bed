//! Full 50-epoch desk run; about half an hour on one core.
//! Run with `cargo test -p ctsae --test long_run -- --ignored --nocapture`.

use ctsae::data::{load_dataset, split_indices, synthesize, SynthSpec, DEFAULT_FRACTIONS};
use ctsae::pipeline::prepare;
use ctsae::train::{train_loop, TrainConfig, TrainState};
use ctsae::ModelConfig;

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
#[ignore]
fn fifty_desk_epochs_keep_improving() {
    let dir = tempfile::tempdir().unwrap();
    synthesize(&SynthSpec { seed: 7, ..SynthSpec::default() }, &dir.path().join("data")).unwrap();
    let samples = prepare(&load_dataset(&dir.path().join("data/manifest.csv")).unwrap(), 64).unwrap();
    let labels: Vec<Option<usize>> = samples.iter().map(|s| s.label).collect();
    let split = split_indices(&labels, DEFAULT_FRACTIONS, 0).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>();

    let cfg = TrainConfig { epochs: 50, checkpoint_every: 0, ..TrainConfig::default() };
    let mut state = TrainState::<f32>::new(ModelConfig::desk(), cfg).unwrap();
    let out = train_loop(&mut state, &pick(&split.train), &pick(&split.val), &dir.path().join("run"), &mut |_| {}).unwrap();

    for row in &out.curve {
        println!("{}", row.line());
    }
    let train: Vec<f64> = out.curve.iter().map(|r| r.train).collect();
    let val: Vec<f64> = out.curve.iter().map(|r| r.val).collect();
    assert!(train.iter().chain(&val).all(|v| v.is_finite()));
    let avg = moving_average(&train, 10);
    let rises: Vec<(usize, f64)> = avg.windows(2).enumerate().filter(|(_, w)| w[1] > w[0]).map(|(i, w)| (i + 11, w[1] - w[0])).collect();
    println!("initial val {:.4}, best val {:.4}; moving-average rises {rises:?}", out.initial_val, out.best_val);
    assert!(rises.is_empty(), "10-epoch moving average of the training loss rose at {rises:?}");
    assert!(val.iter().copied().fold(f64::INFINITY, f64::min) < 0.5 * out.initial_val);
}
