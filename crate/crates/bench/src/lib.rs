//! Seeded inputs shared by the benchmarks.

pub use dproto;

use dproto::features::{Waveform, CLIP_SAMPLES, FRAMES, N_MELS, SAMPLE_RATE};
use dproto::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// Batch of log-mel-shaped inputs, `(n, 1, 40, 98)`.
pub fn features(n: usize, seed: u64) -> Tensor {
    uniform(&[n, 1, N_MELS, FRAMES], seed)
}

/// One second of a two-tone signal with a little noise.
pub fn tone(seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fa, fb) = (rng.gen_range(200.0..800.0), rng.gen_range(1000.0..3000.0));
    let sr = SAMPLE_RATE as f64;
    Waveform::from_samples(
        (0..CLIP_SAMPLES)
            .map(|i| {
                let t = i as f64 / sr;
                0.3 * (std::f64::consts::TAU * fa * t).sin()
                    + 0.1 * (std::f64::consts::TAU * fb * t).sin()
                    + rng.gen_range(-0.01..0.01)
            })
            .collect(),
    )
}

/// Known and unknown score lists of the given sizes.
pub fn scores(known: usize, unknown: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = (0..known).map(|_| rng.gen_range(0.0..1.0)).collect();
    let u = (0..unknown).map(|_| rng.gen_range(0.2..1.2)).collect();
    (k, u)
}
