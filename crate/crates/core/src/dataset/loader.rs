use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::Rng;

use super::manifest::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::{
    augment_noise, load_wav, read_pcm16, LogMelExtractor, NoiseAugment, NoiseBank, NoiseClip,
    Waveform, FRAMES, N_MELS,
};
use crate::numerics::Tensor;

type Key = (PathBuf, Option<usize>);

/// Turns manifest entries into `1 × 40 × 98` log-mel inputs, optionally with
/// noise augmentation. Clean features are cached; silence clips are read once.
/// Safe to share between threads.
pub struct FeatureLoader {
    extractor: LogMelExtractor,
    clips: Mutex<HashMap<PathBuf, Arc<NoiseClip>>>,
    cache: Mutex<HashMap<Key, Arc<Vec<f64>>>>,
    cache_limit: usize,
}

impl Default for FeatureLoader {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureLoader {
    pub fn new() -> Self {
        Self::with_cache_limit(16_384)
    }

    /// `limit` caps the number of cached clean feature maps (about 31 KB each).
    pub fn with_cache_limit(limit: usize) -> Self {
        Self {
            extractor: LogMelExtractor::new(),
            clips: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
            cache_limit: limit,
        }
    }

    fn clip(&self, path: &PathBuf) -> Result<Arc<NoiseClip>> {
        if let Some(c) = self.clips.lock().expect("clip cache poisoned").get(path) {
            return Ok(Arc::clone(c));
        }
        let clip = Arc::new(NoiseClip {
            path: path.clone(),
            samples: read_pcm16(path)?,
        });
        self.clips
            .lock()
            .expect("clip cache poisoned")
            .insert(path.clone(), Arc::clone(&clip));
        Ok(clip)
    }

    pub fn waveform(&self, entry: &ManifestEntry) -> Result<Waveform> {
        if entry.is_silence {
            let offset = entry.crop_offset.ok_or_else(|| Error::ManifestParse {
                line: 0,
                msg: format!("silence entry {} has no crop offset", entry.path.display()),
            })?;
            Ok(self.clip(&entry.path)?.crop(offset))
        } else {
            load_wav(&entry.path)
        }
    }

    fn clean(&self, entry: &ManifestEntry) -> Result<Arc<Vec<f64>>> {
        let key = (entry.path.clone(), entry.crop_offset);
        if let Some(v) = self.cache.lock().expect("feature cache poisoned").get(&key) {
            return Ok(Arc::clone(v));
        }
        let values = Arc::new(
            self.extractor
                .compute(&self.waveform(entry)?)
                .values()
                .to_vec(),
        );
        let mut cache = self.cache.lock().expect("feature cache poisoned");
        if cache.len() < self.cache_limit {
            cache.insert(key, Arc::clone(&values));
        }
        Ok(values)
    }

    /// Stacked `(B, 1, 40, 98)` features of `indices`, in order. With
    /// `augment`, every waveform first goes through [`augment_noise`].
    pub fn batch<R: Rng + ?Sized>(
        &self,
        manifest: &Manifest,
        indices: &[usize],
        mut augment: Option<(&NoiseBank, NoiseAugment, &mut R)>,
    ) -> Result<Tensor> {
        let plane = N_MELS * FRAMES;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            let entry = manifest.entry(i);
            match augment.as_mut() {
                Some((bank, cfg, rng)) if cfg.probability > 0.0 => {
                    let (wave, applied) = augment_noise(&self.waveform(entry)?, bank, *rng, *cfg)?;
                    if applied {
                        data.extend_from_slice(self.extractor.compute(&wave).values());
                    } else {
                        data.extend_from_slice(&self.clean(entry)?);
                    }
                }
                _ => data.extend_from_slice(&self.clean(entry)?),
            }
        }
        Tensor::new(vec![indices.len(), 1, N_MELS, FRAMES], data)
    }
}
