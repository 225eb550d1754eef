use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{RfnConfig, FRAMES, N_MELS};

/// Number of conv → batch-norm → ReLU → 2×2 max-pool blocks.
pub const CONV_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of every conv block.
    pub channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Flattened embedding width: channels × pooled mel extent × pooled frame
    /// extent (40 × 98 pools down to 2 × 6).
    pub fn embedding_dim(&self) -> usize {
        self.channels * pooled(N_MELS) * pooled(FRAMES)
    }
}

fn pooled(extent: usize) -> usize {
    (0..CONV_BLOCKS).fold(extent, |e, _| e / 2)
}

/// DeepSets dummy generator: `max_rows(FC-ReLU-FC(C)) · W_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// Hidden width H of both FC layers.
    pub hidden: usize,
    /// Number of dummies L.
    pub dummies: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            dummies: 3,
        }
    }
}

/// Softmax temperatures of the N+1 posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    /// Temperature of every known class.
    pub tau_known: f64,
    /// The dummy class uses `gamma * tau_known`.
    pub gamma: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau_known: 1.0,
            gamma: 3.0,
        }
    }
}

impl ScoringConfig {
    pub fn tau_dummy(&self) -> f64 {
        self.gamma * self.tau_known
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_known > 0.0 && self.tau_known.is_finite())
            || !(self.gamma >= 1.0 && self.gamma.is_finite())
        {
            return Err(Error::Config(format!(
                "need tau > 0 and gamma >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model from its weights. `generator: None`
/// is the dummy-free prototypical-network baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub generator: Option<GeneratorConfig>,
    pub scoring: ScoringConfig,
    /// Input normalization applied before the encoder.
    pub rfn: Option<RfnConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            generator: Some(GeneratorConfig::default()),
            scoring: ScoringConfig::default(),
            rfn: None,
        }
    }
}

impl ModelConfig {
    pub fn baseline(encoder: EncoderConfig, scoring: ScoringConfig) -> Self {
        Self {
            encoder,
            generator: None,
            scoring,
            rfn: None,
        }
    }

    pub fn scoring(&self) -> &ScoringConfig {
        &self.scoring
    }

    pub fn is_baseline(&self) -> bool {
        self.generator.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.channels == 0
            || !(self.encoder.bn_eps > 0.0)
            || !(0.0..=1.0).contains(&self.encoder.bn_momentum)
        {
            return Err(Error::Config(format!(
                "invalid encoder config {:?}",
                self.encoder
            )));
        }
        if let Some(g) = self.generator {
            if g.hidden == 0 || g.dummies == 0 {
                return Err(Error::Config(format!(
                    "generator needs hidden > 0 and at least one dummy, got {g:?}"
                )));
            }
        }
        if let Some(r) = self.rfn {
            r.validate()?;
        }
        self.scoring.validate()
    }

    /// Flat key/value form stored in checkpoints.
    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("model.channels", self.encoder.channels.to_string());
        put("model.bn_eps", self.encoder.bn_eps.to_string());
        put("model.bn_momentum", self.encoder.bn_momentum.to_string());
        let g = self.generator.unwrap_or(GeneratorConfig {
            dummies: 0,
            ..GeneratorConfig::default()
        });
        put("model.hidden", g.hidden.to_string());
        put("model.dummies", g.dummies.to_string());
        put("scoring.tau", self.scoring.tau_known.to_string());
        put("scoring.gamma", self.scoring.gamma.to_string());
        let r = self.rfn.unwrap_or_default();
        put("rfn.enabled", self.rfn.is_some().to_string());
        put("rfn.rho", r.rho.to_string());
        put("rfn.epsilon", r.epsilon.to_string());
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = meta
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Checkpoint(format!("bad value `{raw}` for `{key}`")))
        }
        let dummies: usize = get(meta, "model.dummies")?;
        let cfg = Self {
            encoder: EncoderConfig {
                channels: get(meta, "model.channels")?,
                bn_eps: get(meta, "model.bn_eps")?,
                bn_momentum: get(meta, "model.bn_momentum")?,
            },
            generator: (dummies > 0).then_some(GeneratorConfig {
                hidden: get(meta, "model.hidden")?,
                dummies,
            }),
            scoring: ScoringConfig {
                tau_known: get(meta, "scoring.tau")?,
                gamma: get(meta, "scoring.gamma")?,
            },
            rfn: if get::<bool>(meta, "rfn.enabled")? {
                Some(RfnConfig {
                    rho: get(meta, "rfn.rho")?,
                    epsilon: get(meta, "rfn.epsilon")?,
                })
            } else {
                None
            },
        };
        cfg.validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}
