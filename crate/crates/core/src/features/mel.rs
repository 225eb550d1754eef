use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::numerics::Tensor;

pub const N_MELS: usize = 40;
/// 30 ms analysis window.
pub const WINDOW: usize = 480;
/// 10 ms frame shift.
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const FRAMES: usize = 1 + (CLIP_SAMPLES - WINDOW) / HOP;
pub const LOG_FLOOR: f64 = 1e-6;

const F_MAX: f64 = 8_000.0;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `N_MELS × FRAMES` log mel energies, row-major (bin-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LogMel {
    values: Vec<f64>,
}

impl LogMel {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * FRAMES + frame]
    }

    /// As a `1 × N_MELS × FRAMES` tensor (one input channel).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, N_MELS, FRAMES], self.values.clone()).expect("fixed shape")
    }
}

struct Triangle {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed window, FFT plan and mel filterbank.
pub struct LogMelExtractor {
    window: Vec<f64>,
    filters: Vec<Triangle>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        // periodic Hann
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let mel_max = hz_to_mel(F_MAX);
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = f64::from(SAMPLE_RATE) / N_FFT as f64;
        let filters = (0..N_MELS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first_bin = None;
                let mut weights = Vec::new();
                for k in 0..=N_FFT / 2 {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(w);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                Triangle {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self {
            window,
            filters,
            fft,
        }
    }

    pub fn compute(&self, wave: &Waveform) -> LogMel {
        let x = wave.samples();
        let mut values = vec![0.0; N_MELS * FRAMES];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; N_FFT / 2 + 1];
        for t in 0..FRAMES {
            let frame = &x[t * HOP..t * HOP + WINDOW];
            for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s * w, 0.0);
            }
            buf[WINDOW..].fill(Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, tri) in self.filters.iter().enumerate() {
                let e: f64 = tri
                    .weights
                    .iter()
                    .zip(&power[tri.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                values[m * FRAMES + t] = e.max(LOG_FLOOR).ln();
            }
        }
        LogMel { values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count() {
        assert_eq!(FRAMES, 98);
        assert_eq!(FRAMES, 1 + (16_000 - 480) / 160);
    }

    #[test]
    fn silence_hits_the_floor() {
        let lm = LogMelExtractor::new().compute(&Waveform::silent());
        assert_eq!(lm.values().len(), 40 * 98);
        assert!(lm.values().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_in_the_filter_covering_its_frequency() {
        // Oracle: the triangle with the largest weight at 1 kHz, evaluated
        // straight from the HTK formula.
        let top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let hz = |i: usize| 700.0 * (10f64.powf(top * i as f64 / 41.0 / 2595.0) - 1.0);
        let weight = |m: usize, f: f64| {
            let (a, b, c) = (hz(m), hz(m + 1), hz(m + 2));
            if f > a && f <= b {
                (f - a) / (b - a)
            } else if f > b && f < c {
                (c - f) / (c - b)
            } else {
                0.0
            }
        };
        let expected = (0..40)
            .max_by(|&a, &b| weight(a, 1000.0).partial_cmp(&weight(b, 1000.0)).unwrap())
            .unwrap();

        let tone: Vec<f64> = (0..16_000)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let lm = LogMelExtractor::new().compute(&Waveform::from_samples(tone));
        for t in 0..FRAMES {
            let arg = (0..N_MELS)
                .max_by(|&a, &b| lm.get(a, t).partial_cmp(&lm.get(b, t)).unwrap())
                .unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn every_filter_covers_at_least_one_bin() {
        let ex = LogMelExtractor::new();
        assert!(ex.filters.iter().all(|f| !f.weights.is_empty()));
    }
}
