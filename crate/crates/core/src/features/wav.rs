use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// One second at [`SAMPLE_RATE`].
pub const CLIP_SAMPLES: usize = 16_000;

/// Exactly one second of 16 kHz mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    /// Zero-pads short input at the end and center-crops long input.
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.len() > CLIP_SAMPLES {
            let start = (samples.len() - CLIP_SAMPLES) / 2;
            samples.drain(..start);
            samples.truncate(CLIP_SAMPLES);
        } else {
            samples.resize(CLIP_SAMPLES, 0.0);
        }
        for s in &mut samples {
            *s = s.clamp(-1.0, 1.0);
        }
        Self { samples }
    }

    pub fn silent() -> Self {
        Self {
            samples: vec![0.0; CLIP_SAMPLES],
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }
}

fn wav_err(path: &Path, msg: impl ToString) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads a whole 16 kHz mono PCM16 file, scaled to `[-1, 1)`.
pub fn read_pcm16(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(path, other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("expected mono, found {} channels", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(
            path,
            format!("expected {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(path, "expected 16-bit PCM"));
    }
    reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| f64::from(v) / 32768.0)
                .map_err(|e| wav_err(path, format!("truncated or corrupt data: {e}")))
        })
        .collect()
}

pub fn load_wav(path: &Path) -> Result<Waveform> {
    read_pcm16(path).map(Waveform::from_samples)
}

/// Writes samples (clamped to `[-1, 1]`) as 16 kHz mono PCM16.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}
