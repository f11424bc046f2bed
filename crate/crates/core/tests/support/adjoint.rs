use ctsae_tensor::{conv2d_output_size, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relative gap `|<conv(x), y> - <x, conv_t(y)>|` for one random case.
pub fn adjoint_gap(rng: &mut ChaCha8Rng, n: usize, cin: usize, cout: usize, h: usize, k: usize, stride: usize, pad: usize) -> f64 {
    let oh = conv2d_output_size(h, k, stride, pad).unwrap();
    let mut random = |shape: &[usize]| Tensor::<f64>::uniform(shape.to_vec(), 1.0, rng);
    let (x, y, w) = (random(&[n, cin, h, h]), random(&[n, cout, oh, oh]), random(&[cout, cin, k, k]));
    let output_padding = (h + 2 * pad - k) % stride;
    let mut tape = Tape::new();
    let (xv, yv, wv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(w));
    let cx = tape.conv2d(xv, wv, None, stride, pad).unwrap();
    let ty = tape.conv_transpose2d_padded(yv, wv, None, stride, pad, output_padding).unwrap();
    assert_eq!(tape.shape(ty), x.shape());
    let (lhs, rhs) = (tape.value(cx).dot(&y), x.dot(tape.value(ty)));
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12)
}

/// Worst gap over `cases` random kernel, stride, padding and size choices.
pub fn worst_adjoint_gap(seed: u64, cases: usize) -> f64 {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let k = rng.random_range(1..=4);
            let stride = rng.random_range(1..=3);
            let pad = rng.random_range(0..k);
            let h = rng.random_range(k.max(2)..=8);
            let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            adjoint_gap(&mut rng, n, cin, cout, h, k, stride, pad)
        })
        .fold(0.0, f64::max)
}
