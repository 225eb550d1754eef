//! Synthetic keyword corpus with the same split structure as Speech
//! Commands, for desk-scale experiments.
//!
//! Every class is a two-segment tone pattern: a tone pair (from a fixed
//! log-spaced grid, distinct per class), a glide direction and an amplitude
//! modulation rate. Utterances vary in onset, duration, pitch, level and
//! additive noise level. A handful of colored-noise clips stand in for the
//! background-noise directory and feed the silence class.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::{add_silence, Manifest, ManifestEntry};
use super::split::Split;
use crate::error::{Error, Result};
use crate::features::{write_wav, NoiseBank, CLIP_SAMPLES, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub noise_clips: usize,
    pub noise_seconds: usize,
    /// Per-utterance SNR range of the additive white noise, in dB.
    pub snr_db: (f64, f64),
    /// Relative per-utterance pitch jitter.
    pub pitch_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_classes: 15,
            val_classes: 10,
            test_classes: 10,
            samples_per_class: 40,
            noise_clips: 4,
            noise_seconds: 10,
            snr_db: (5.0, 20.0),
            pitch_jitter: 0.04,
        }
    }
}

impl SynthConfig {
    /// Splits `n_classes` (at least 12) over train / val / test in the same
    /// 15 : 10 : 10 proportion as the keyword partition.
    pub fn with_classes(n_classes: usize, samples_per_class: usize) -> Result<Self> {
        if n_classes < 12 {
            return Err(Error::Config(format!(
                "synthetic corpus needs at least 12 classes, got {n_classes}"
            )));
        }
        let train = (n_classes as f64 * 3.0 / 7.0).round() as usize;
        let val = (n_classes - train) / 2;
        Ok(Self {
            train_classes: train,
            val_classes: val,
            test_classes: n_classes - train - val,
            samples_per_class,
            ..Self::default()
        })
    }

    pub fn n_classes(&self) -> usize {
        self.train_classes + self.val_classes + self.test_classes
    }

    fn split_of(&self, class: usize) -> Split {
        if class < self.train_classes {
            Split::Train
        } else if class < self.train_classes + self.val_classes {
            Split::Val
        } else {
            Split::Test
        }
    }
}

const GRID: usize = 16;

fn grid_hz(i: usize) -> f64 {
    250.0 * (3800.0f64 / 250.0).powf(i as f64 / (GRID - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecipe {
    pub name: String,
    pub tone_a: f64,
    pub tone_b: f64,
    /// Octaves swept across each segment.
    pub glide: f64,
    pub am_rate: f64,
}

impl ClassRecipe {
    fn draw_all<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<Self>> {
        let mut pairs: Vec<(usize, usize)> = (0..GRID)
            .flat_map(|a| (a + 1..GRID).map(move |b| (a, b)))
            .collect();
        if n > pairs.len() {
            return Err(Error::Config(format!(
                "at most {} synthetic classes are supported",
                pairs.len()
            )));
        }
        pairs.shuffle(rng);
        Ok(pairs[..n]
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| {
                let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
                ClassRecipe {
                    name: format!("kw{k:02}"),
                    tone_a: grid_hz(a),
                    tone_b: grid_hz(b),
                    glide: [-0.4, 0.0, 0.4][rng.gen_range(0..3)],
                    am_rate: rng.gen_range(3.0..9.0),
                }
            })
            .collect())
    }

    /// One utterance of this class.
    pub fn render<R: Rng + ?Sized>(&self, cfg: &SynthConfig, rng: &mut R) -> Vec<f64> {
        let sr = f64::from(SAMPLE_RATE);
        let dur = rng.gen_range(0.4..0.7);
        let onset = rng.gen_range(0.05..0.95 - dur);
        let amp = rng.gen_range(0.15..0.45);
        let jitter = [
            1.0 + rng.gen_range(-cfg.pitch_jitter..=cfg.pitch_jitter),
            1.0 + rng.gen_range(-cfg.pitch_jitter..=cfg.pitch_jitter),
        ];
        let am_phase = rng.gen_range(0.0..2.0 * PI);
        let ramp = 0.02;
        let mut out = vec![0.0; CLIP_SAMPLES];
        let mut phase = 0.0;
        let (start, end) = ((onset * sr) as usize, ((onset + dur) * sr) as usize);
        for (n, o) in out.iter_mut().enumerate().take(end).skip(start) {
            let t = n as f64 / sr - onset;
            let rel = t / dur;
            let (seg, s) = if rel < 0.5 {
                (0, rel * 2.0)
            } else {
                (1, rel * 2.0 - 1.0)
            };
            let base = if seg == 0 { self.tone_a } else { self.tone_b };
            let f = base * jitter[seg] * 2f64.powf(self.glide * (s - 0.5));
            phase += 2.0 * PI * f / sr;
            let edge = (t / ramp).min((dur - t) / ramp).clamp(0.0, 1.0);
            let am = (1.0 + 0.5 * (2.0 * PI * self.am_rate * t + am_phase).sin()) / 1.5;
            *o = amp * edge * am * (phase.sin() + 0.35 * (2.0 * phase).sin());
        }
        let active = &out[start..end];
        let rms = (active.iter().map(|v| v * v).sum::<f64>() / active.len().max(1) as f64).sqrt();
        let snr = rng.gen_range(cfg.snr_db.0..=cfg.snr_db.1);
        let sigma = rms / 10f64.powf(snr / 20.0);
        for o in &mut out {
            // sum of uniforms, variance 1
            let g: f64 =
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * (3.0f64 / 4.0).sqrt();
            *o = (*o + sigma * g).clamp(-1.0, 1.0);
        }
        out
    }
}

fn render_noise<R: Rng + ?Sized>(kind: usize, len: usize, rng: &mut R) -> Vec<f64> {
    let mut white = || rng.gen_range(-1.0..1.0);
    let mut out: Vec<f64> = match kind % 4 {
        0 => (0..len).map(|_| white()).collect(),
        1 => {
            // pinkish: sum of leaky integrators at several time constants
            let mut state = [0.0; 3];
            (0..len)
                .map(|_| {
                    let w = white();
                    for (s, k) in state.iter_mut().zip([0.99, 0.9, 0.5]) {
                        *s = k * *s + (1.0 - k) * w;
                    }
                    state.iter().sum::<f64>() + 0.2 * w
                })
                .collect()
        }
        2 => {
            let mut s = 0.0;
            (0..len)
                .map(|_| {
                    s = 0.995 * s + white();
                    s
                })
                .collect()
        }
        _ => (0..len)
            .map(|n| {
                let t = n as f64 / f64::from(SAMPLE_RATE);
                (1..=4)
                    .map(|h| (2.0 * PI * 50.0 * h as f64 * t).sin() / h as f64)
                    .sum::<f64>()
                    + 0.3 * white()
            })
            .collect(),
    };
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let gain = rng.gen_range(0.3..0.6) / peak;
    out.iter_mut().for_each(|v| *v *= gain);
    out
}

/// Writes the corpus under `out_dir` (`<class>/<nnn>.wav`,
/// `_background_noise_/*.wav`, `manifest.tsv`) and returns its manifest,
/// silence entries included.
pub fn synth_corpus<R: Rng + ?Sized>(
    out_dir: &Path,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Manifest> {
    if cfg.n_classes() < 12 || cfg.samples_per_class == 0 || cfg.noise_clips == 0 {
        return Err(Error::Config(format!(
            "synthetic corpus needs >= 12 classes, samples and noise clips: {cfg:?}"
        )));
    }
    let recipes = ClassRecipe::draw_all(cfg.n_classes(), rng)?;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out_dir)?;
    let mut entries = Vec::with_capacity(cfg.n_classes() * cfg.samples_per_class);
    for (k, recipe) in recipes.iter().enumerate() {
        let dir = out_dir.join(&recipe.name);
        mkdir(&dir)?;
        for i in 0..cfg.samples_per_class {
            let path = dir.join(format!("{i:03}.wav"));
            write_wav(&path, &recipe.render(cfg, rng))?;
            entries.push(ManifestEntry {
                path,
                keyword: recipe.name.clone(),
                split: cfg.split_of(k),
                is_silence: false,
                crop_offset: None,
            });
        }
    }
    let noise_dir = out_dir.join("_background_noise_");
    mkdir(&noise_dir)?;
    for c in 0..cfg.noise_clips {
        let samples = render_noise(c, cfg.noise_seconds.max(1) * CLIP_SAMPLES, rng);
        write_wav(&noise_dir.join(format!("noise_{c:02}.wav")), &samples)?;
    }
    let bank = NoiseBank::load_dir(&noise_dir)?;
    let manifest = add_silence(&Manifest::new(entries), &bank, rng)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
