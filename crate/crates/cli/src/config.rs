//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`train.epochs`). A `[section]` header prefixes the keys
//! that follow it, so `[train]` + `epochs = 10` sets `train.epochs`. Lines
//! starting with `#` or `;` are comments. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dproto::dataset::{EpisodeConfig, Split};
use dproto::eval::ScoreRule;
use dproto::features::{NoiseAugment, RfnConfig};
use dproto::model::{EncoderConfig, GeneratorConfig, ModelConfig, ScoringConfig};
use dproto::training::{GumbelSchedule, LossConfig, LrSchedule, TrainConfig};
use dproto::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Count,
    Real,
    Flag,
    Text,
    Rule,
    Split,
    Seed,
}

/// One configuration key with its default and a short description.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    kind: Kind,
}

const fn key(key: &'static str, kind: Kind, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        default,
        help,
        kind,
    }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", Kind::Seed, "0", "root seed for every random stream"),
    key("data.manifest", Kind::Text, "", "manifest TSV"),
    key(
        "data.noise_dir",
        Kind::Text,
        "",
        "background-noise directory (default: _background_noise_ next to the manifest)",
    ),
    key(
        "episode.n_way",
        Kind::Count,
        "5",
        "known classes per episode (N)",
    ),
    key(
        "episode.n_shot",
        Kind::Count,
        "5",
        "supports per known class (M)",
    ),
    key(
        "episode.n_query",
        Kind::Count,
        "5",
        "training queries per class (M_Q)",
    ),
    key(
        "episode.n_open",
        Kind::Count,
        "5",
        "open-set classes per episode (N_U)",
    ),
    key(
        "model.channels",
        Kind::Count,
        "64",
        "conv channels; embedding width D = channels * 12",
    ),
    key("model.bn_eps", Kind::Real, "1e-5", "batch-norm epsilon"),
    key(
        "model.bn_momentum",
        Kind::Real,
        "0.1",
        "batch-norm running-statistics momentum",
    ),
    key(
        "model.hidden",
        Kind::Count,
        "32",
        "dummy generator hidden width (H)",
    ),
    key(
        "model.dummies",
        Kind::Count,
        "3",
        "dummy candidates per episode (L); 0 = plain prototypical network",
    ),
    key(
        "scoring.tau",
        Kind::Real,
        "1",
        "softmax temperature of known classes",
    ),
    key(
        "scoring.gamma",
        Kind::Real,
        "3",
        "dummy temperature multiplier",
    ),
    key(
        "loss.lambda",
        Kind::Real,
        "0.1",
        "weight of the open-query loss",
    ),
    key("train.epochs", Kind::Count, "100", "training epochs"),
    key(
        "train.episodes_per_epoch",
        Kind::Count,
        "100",
        "episodes per epoch",
    ),
    key(
        "train.lr",
        Kind::Real,
        "0.001",
        "initial Adam learning rate",
    ),
    key(
        "train.lr_decay",
        Kind::Real,
        "0.5",
        "learning-rate factor per step",
    ),
    key(
        "train.lr_step_epochs",
        Kind::Count,
        "20",
        "epochs between learning-rate steps",
    ),
    key(
        "train.gumbel_start",
        Kind::Real,
        "2",
        "Gumbel-softmax temperature at the first epoch",
    ),
    key(
        "train.gumbel_end",
        Kind::Real,
        "0.5",
        "Gumbel-softmax temperature at the last epoch",
    ),
    key(
        "train.val_episodes",
        Kind::Count,
        "200",
        "validation episodes per epoch",
    ),
    key(
        "train.val_queries",
        Kind::Count,
        "15",
        "queries per class in validation episodes",
    ),
    key(
        "train.augment_prob",
        Kind::Real,
        "0.8",
        "probability of mixing in background noise",
    ),
    key(
        "train.augment_scale",
        Kind::Real,
        "0.1",
        "maximum background-noise gain",
    ),
    key("eval.episodes", Kind::Count, "1000", "evaluation episodes"),
    key(
        "eval.queries",
        Kind::Count,
        "15",
        "queries per class in evaluation episodes",
    ),
    key(
        "eval.score",
        Kind::Rule,
        "dummy_prob",
        "open-set score rule",
    ),
    key(
        "eval.split",
        Kind::Split,
        "test",
        "split to evaluate (train, val, test)",
    ),
    key(
        "rfn.enabled",
        Kind::Flag,
        "false",
        "apply relaxed instance frequency-wise normalization",
    ),
    key(
        "rfn.rho",
        Kind::Real,
        "0.5",
        "layer-norm weight of the normalization blend",
    ),
    key(
        "rfn.epsilon",
        Kind::Real,
        "1e-10",
        "variance floor of the normalization",
    ),
    key(
        "gradcheck.probes",
        Kind::Count,
        "50",
        "coordinates probed by gradcheck",
    ),
    key(
        "gradcheck.step",
        Kind::Real,
        "1e-5",
        "central-difference step",
    ),
    key(
        "gradcheck.tolerance",
        Kind::Real,
        "1e-4",
        "largest accepted relative error",
    ),
];

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (file or --set KEY=VALUE), with defaults:\n");
    for k in KEYS {
        let default = if k.default.is_empty() {
            "\"\""
        } else {
            k.default
        };
        let _ = writeln!(out, "  {:width$}  {:>10}  {}", k.key, default, k.help);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.key, k.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("config line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            let full = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            cfg.set(&full, v.trim()).map_err(|e| bad(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    /// Sets one key, checking that it exists and that the value parses.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec_of(key).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let ok = match spec.kind {
            Kind::Count => value.parse::<usize>().is_ok(),
            Kind::Seed => value.parse::<u64>().is_ok(),
            Kind::Real => value.parse::<f64>().is_ok_and(f64::is_finite),
            Kind::Flag => value.parse::<bool>().is_ok(),
            Kind::Rule => value.parse::<ScoreRule>().is_ok(),
            Kind::Split => value.parse::<Split>().is_ok(),
            Kind::Text => true,
        };
        if !ok {
            return Err(Error::Config(format!(
                "invalid value `{value}` for `{key}`"
            )));
        }
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered key `{key}`"))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> T {
        self.get(key)
            .parse()
            .ok()
            .unwrap_or_else(|| panic!("`{key}` was validated on set"))
    }

    fn count(&self, key: &str) -> usize {
        self.parsed(key)
    }

    fn real(&self, key: &str) -> f64 {
        self.parsed(key)
    }

    /// Every key in table order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.key, self.get(k.key)))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.parsed("seed")
    }

    pub fn manifest_path(&self) -> Result<PathBuf> {
        match self.get("data.manifest") {
            "" => Err(Error::Config("data.manifest is not set".into())),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn noise_dir(&self) -> Result<PathBuf> {
        match self.get("data.noise_dir") {
            "" => Ok(self
                .manifest_path()?
                .parent()
                .unwrap_or(Path::new("."))
                .join("_background_noise_")),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_way: self.count("episode.n_way"),
            n_shot: self.count("episode.n_shot"),
            n_open: self.count("episode.n_open"),
            n_query: self.count("episode.n_query"),
        }
    }

    pub fn eval_episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_query: self.count("eval.queries"),
            ..self.episode()
        }
    }

    pub fn eval_episodes(&self) -> usize {
        self.count("eval.episodes")
    }

    pub fn score_rule(&self) -> ScoreRule {
        self.parsed("eval.score")
    }

    pub fn eval_split(&self) -> Split {
        self.parsed("eval.split")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let dummies = self.count("model.dummies");
        let rfn = self.parsed::<bool>("rfn.enabled").then(|| RfnConfig {
            rho: self.real("rfn.rho"),
            epsilon: self.real("rfn.epsilon"),
        });
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                channels: self.count("model.channels"),
                bn_eps: self.real("model.bn_eps"),
                bn_momentum: self.real("model.bn_momentum"),
            },
            generator: (dummies > 0).then(|| GeneratorConfig {
                hidden: self.count("model.hidden"),
                dummies,
            }),
            scoring: ScoringConfig {
                tau_known: self.real("scoring.tau"),
                gamma: self.real("scoring.gamma"),
            },
            rfn,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.count("train.epochs"),
            episodes_per_epoch: self.count("train.episodes_per_epoch"),
            episode: self.episode(),
            val_episodes: self.count("train.val_episodes"),
            val_queries: self.count("train.val_queries"),
            lr: LrSchedule {
                initial: self.real("train.lr"),
                decay: self.real("train.lr_decay"),
                step_epochs: self.count("train.lr_step_epochs"),
            },
            gumbel: GumbelSchedule {
                start: self.real("train.gumbel_start"),
                end: self.real("train.gumbel_end"),
            },
            loss: LossConfig {
                lambda: self.real("loss.lambda"),
            },
            augment: NoiseAugment {
                probability: self.real("train.augment_prob"),
                max_scale: self.real("train.augment_scale"),
            },
            seed: self.seed(),
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gradcheck_probes(&self) -> usize {
        self.count("gradcheck.probes")
    }

    pub fn gradcheck_step(&self) -> f64 {
        self.real("gradcheck.step")
    }

    pub fn gradcheck_tolerance(&self) -> f64 {
        self.real("gradcheck.tolerance")
    }

    /// Plain prototypical network: no dummies, no open-query loss.
    pub fn make_baseline(&mut self) {
        self.values.insert("model.dummies", "0".into());
        self.values.insert("loss.lambda", "0".into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let c = RunConfig::default();
        let t = c.train().unwrap();
        let d = TrainConfig::default();
        assert_eq!(
            (t.epochs, t.episodes_per_epoch, t.episode),
            (d.epochs, d.episodes_per_epoch, d.episode)
        );
        assert_eq!(
            (t.lr, t.gumbel, t.loss, t.augment),
            (d.lr, d.gumbel, d.loss, d.augment)
        );
        assert_eq!(c.model().unwrap(), ModelConfig::default());
        assert_eq!(c.eval_episodes(), 1000);
        assert_eq!(c.score_rule(), ScoreRule::DummyProb);
    }

    #[test]
    fn sections_and_comments() {
        let c =
            RunConfig::parse("# run\nseed = 7\n[train]\nepochs = 3\n; note\n[model]\ndummies=1\n")
                .unwrap();
        assert_eq!(c.seed(), 7);
        assert_eq!(c.train().unwrap().epochs, 3);
        assert_eq!(c.model().unwrap().generator.unwrap().dummies, 1);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("train.epoch = 3").is_err());
        assert!(RunConfig::parse("[train]\nepochs = three").is_err());
        assert!(RunConfig::parse("eval.score = best").is_err());
        assert!(RunConfig::parse("eval.split = dev").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::default().set_pair("loss.lambda").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("scoring.gamma", "1").unwrap();
        c.set("data.manifest", "/tmp/m.tsv").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn baseline_has_no_dummies() {
        let mut c = RunConfig::default();
        c.make_baseline();
        assert!(c.model().unwrap().is_baseline());
        assert_eq!(c.train().unwrap().loss.lambda, 0.0);
    }

    #[test]
    fn help_lists_every_key() {
        let h = keys_help();
        assert!(KEYS.iter().all(|k| h.contains(k.key)));
    }
}
