//! Audio front end: 1 s, 16 kHz waveforms, 40-bin log-mel spectrograms,
//! background-noise augmentation and relaxed instance frequency-wise
//! normalization (RFN) of the resulting features.

mod augment;
mod mel;
mod rfn;
mod wav;

pub use augment::{augment_noise, NoiseAugment, NoiseBank, NoiseClip};
pub use mel::{
    hz_to_mel, mel_to_hz, LogMel, LogMelExtractor, FRAMES, HOP, LOG_FLOOR, N_FFT, N_MELS, WINDOW,
};
pub use rfn::{rfn, RfnConfig};
pub use wav::{load_wav, read_pcm16, write_wav, Waveform, CLIP_SAMPLES, SAMPLE_RATE};
