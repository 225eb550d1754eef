use std::path::{Path, PathBuf};

use rand::Rng;

use super::wav::{read_pcm16, Waveform, CLIP_SAMPLES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseClip {
    pub path: PathBuf,
    pub samples: Vec<f64>,
}

impl NoiseClip {
    /// One-second crop starting at `offset`, zero-padded past the clip end.
    pub fn crop(&self, offset: usize) -> Waveform {
        let end = (offset + CLIP_SAMPLES).min(self.samples.len());
        let start = offset.min(end);
        Waveform::from_samples(self.samples[start..end].to_vec())
    }

    /// Largest valid crop offset.
    pub fn max_offset(&self) -> usize {
        self.samples.len().saturating_sub(CLIP_SAMPLES)
    }
}

/// Background-noise clips, as in the `_background_noise_` directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseBank {
    clips: Vec<NoiseClip>,
}

impl NoiseBank {
    pub fn new(clips: Vec<NoiseClip>) -> Self {
        Self { clips }
    }

    /// Loads every `.wav` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let clips = paths
            .into_iter()
            .map(|path| read_pcm16(&path).map(|samples| NoiseClip { path, samples }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips })
    }

    pub fn clips(&self) -> &[NoiseClip] {
        &self.clips
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn find(&self, path: &Path) -> Option<&NoiseClip> {
        self.clips.iter().find(|c| c.path == path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseAugment {
    /// Chance that a waveform receives noise at all.
    pub probability: f64,
    /// Noise gain is drawn from `Uniform(0, max_scale)`.
    pub max_scale: f64,
}

impl Default for NoiseAugment {
    fn default() -> Self {
        Self {
            probability: 0.8,
            max_scale: 0.1,
        }
    }
}

/// With probability `cfg.probability`, mixes in a random one-second crop of a
/// random noise clip scaled by `Uniform(0, max_scale)`, clipping to `[-1, 1]`.
/// Returns the waveform and whether noise was applied.
pub fn augment_noise<R: Rng + ?Sized>(
    wave: &Waveform,
    bank: &NoiseBank,
    rng: &mut R,
    cfg: NoiseAugment,
) -> Result<(Waveform, bool)> {
    if cfg.probability > 0.0 && bank.is_empty() {
        return Err(Error::EmptyNoiseBank);
    }
    if cfg.probability <= 0.0 || rng.gen::<f64>() >= cfg.probability {
        return Ok((wave.clone(), false));
    }
    let clip = &bank.clips[rng.gen_range(0..bank.clips.len())];
    let offset = rng.gen_range(0..=clip.max_offset());
    let scale = if cfg.max_scale > 0.0 {
        rng.gen_range(0.0..cfg.max_scale)
    } else {
        0.0
    };
    let noise = clip.crop(offset);
    let mixed = wave
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(s, n)| s + scale * n)
        .collect();
    Ok((Waveform::from_samples(mixed), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(seed: u64) -> NoiseBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NoiseBank::new(vec![
            NoiseClip {
                path: "a.wav".into(),
                samples: (0..40_000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            },
            NoiseClip {
                path: "b.wav".into(),
                samples: (0..9_000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            },
        ])
    }

    fn tone() -> Waveform {
        Waveform::from_samples((0..16_000).map(|n| 0.3 * (n as f64 * 0.05).sin()).collect())
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, applied) = augment_noise(
            &tone(),
            &bank(1),
            &mut rng,
            NoiseAugment {
                probability: 0.0,
                max_scale: 0.1,
            },
        )
        .unwrap();
        assert!(!applied);
        assert_eq!(w, tone());
        // an empty bank is fine when nothing is ever mixed in
        assert!(augment_noise(
            &tone(),
            &NoiseBank::default(),
            &mut rng,
            NoiseAugment {
                probability: 0.0,
                max_scale: 0.1
            }
        )
        .is_ok());
    }

    #[test]
    fn zero_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, applied) = augment_noise(
            &tone(),
            &bank(1),
            &mut rng,
            NoiseAugment {
                probability: 1.0,
                max_scale: 0.0,
            },
        )
        .unwrap();
        assert!(applied);
        assert_eq!(w, tone());
    }

    #[test]
    fn empty_bank_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = augment_noise(
            &tone(),
            &NoiseBank::default(),
            &mut rng,
            NoiseAugment::default(),
        );
        assert!(matches!(r, Err(Error::EmptyNoiseBank)));
    }

    #[test]
    fn applied_fraction_matches_probability() {
        let b = bank(2);
        let w = Waveform::silent();
        for (p, lo, hi) in [(1.0, 1.0, 1.0), (0.8, 0.8 - 0.012, 0.8 + 0.012)] {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let cfg = NoiseAugment {
                probability: p,
                max_scale: 0.1,
            };
            let hits = (0..10_000)
                .filter(|_| augment_noise(&w, &b, &mut rng, cfg).unwrap().1)
                .count();
            let frac = hits as f64 / 10_000.0;
            assert!(frac >= lo && frac <= hi, "p={p}: {frac}");
        }
    }

    proptest! {
        #[test]
        fn output_stays_in_range(seed in any::<u64>(), amp in 0.0f64..1.0, scale in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Waveform::from_samples((0..16_000).map(|n| amp * if n % 2 == 0 { 1.0 } else { -1.0 }).collect());
            let (out, _) = augment_noise(&w, &bank(seed), &mut rng, NoiseAugment { probability: 1.0, max_scale: scale }).unwrap();
            prop_assert!(out.samples().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
