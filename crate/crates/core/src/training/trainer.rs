use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::{episode_loss, EpisodeLayout, LossConfig};
use super::schedule::{GumbelSchedule, LrSchedule};
use crate::dataset::{EpisodeConfig, EpisodeSampler, FeatureLoader, Manifest, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ScoreRule};
use crate::features::{NoiseAugment, NoiseBank};
use crate::model::{sample_gumbel, Mode, Model, ModelConfig, Selection};
use crate::numerics::{Checkpoint, Tape, Tensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Shape of training episodes.
    pub episode: EpisodeConfig,
    /// Validation episodes per epoch.
    pub val_episodes: usize,
    /// Queries per class in validation episodes.
    pub val_queries: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub gumbel: GumbelSchedule,
    pub loss: LossConfig,
    pub augment: NoiseAugment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            episodes_per_epoch: 100,
            episode: EpisodeConfig {
                n_way: 5,
                n_shot: 5,
                n_open: 5,
                n_query: 5,
            },
            val_episodes: 200,
            val_queries: 15,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            gumbel: GumbelSchedule::default(),
            loss: LossConfig::default(),
            augment: NoiseAugment::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.episodes_per_epoch == 0
            || self.val_episodes == 0
            || self.val_queries == 0
        {
            return Err(Error::Config(format!(
                "training counts must be positive: {self:?}"
            )));
        }
        self.episode.validate()?;
        self.loss.validate()
    }

    /// Shape of validation episodes.
    pub fn val_episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_query: self.val_queries,
            ..self.episode
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auroc: f64,
    pub lr: f64,
    pub gumbel_tau: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the highest validation accuracy (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Checkpoint of the best model, with the selection epoch recorded.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ck = self.best.to_checkpoint();
        ck.meta
            .insert("train.best_epoch".into(), self.best_epoch.to_string());
        ck
    }
}

/// Seed from which every random draw of global episode `index` derives.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    rng::derive_seed(seed, "episode", index)
}

/// Episodic training with per-epoch validation and best-model selection.
/// `on_epoch` sees every history record as soon as it is produced.
pub fn train(
    manifest: &Manifest,
    noise: Option<&NoiseBank>,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.augment.probability > 0.0 && noise.is_none_or(NoiseBank::is_empty) {
        return Err(Error::EmptyNoiseBank);
    }
    let mut model = Model::new(model_cfg, &mut rng::stream(cfg.seed, rng::INIT))?;
    let baseline = model_cfg.is_baseline();
    let val_rule = if baseline {
        ScoreRule::MaxProbComplement
    } else {
        ScoreRule::DummyProb
    };
    let val_seed = rng::derive_seed(cfg.seed, "validation", 0);
    let sampler = EpisodeSampler::new(manifest, Split::Train);
    let loader = FeatureLoader::new();
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        let tau = cfg.gumbel.at(epoch, cfg.epochs);
        let mut loss_sum = 0.0;
        for k in 0..cfg.episodes_per_epoch {
            let ep_seed = episode_seed(cfg.seed, (epoch * cfg.episodes_per_epoch + k) as u64);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    episode: k,
                    seed: ep_seed,
                },
                other => other,
            };
            let episode = sampler.sample(&cfg.episode, &mut rng::stream(ep_seed, rng::SAMPLER))?;
            let (layout, entries) = EpisodeLayout::of(&episode, !baseline);
            let mut aug_rng = rng::stream(ep_seed, rng::AUGMENT);
            let augment = noise
                .filter(|_| cfg.augment.probability > 0.0)
                .map(|bank| (bank, cfg.augment, &mut aug_rng));
            let features = loader.batch(manifest, &entries, augment)?;
            let n_queries = layout.known_queries.len()
                + if baseline {
                    0
                } else {
                    layout.open_queries.len()
                };
            let n_dummies = model_cfg.generator.map_or(0, |g| g.dummies);
            let gumbel = sample_gumbel(
                &mut rng::stream(ep_seed, rng::GUMBEL),
                n_queries * n_dummies,
            );

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let selection = Selection::Gumbel {
                tau,
                noise: &gumbel,
            };
            let (loss, stats) = episode_loss(
                &mut tape,
                &model,
                &bound,
                &layout,
                &features,
                &cfg.loss,
                selection,
                Mode::Train,
            )
            .map_err(diverged)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    episode: k,
                    seed: ep_seed,
                });
            }
            tape.backward(loss).map_err(diverged)?;
            let grads: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(model.params().iter())
                .map(|(&v, (_, p))| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    episode: k,
                    seed: ep_seed,
                });
            }
            adam.step(model.params_mut(), &grads, lr)?;
            model.update_running_stats(&stats)?;
            loss_sum += value;
        }

        let val = evaluate(
            &model,
            manifest,
            Split::Val,
            &cfg.val_episode(),
            cfg.val_episodes,
            val_rule,
            val_seed,
            &loader,
        )?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.episodes_per_epoch as f64,
            val_acc: val.accuracy.mean,
            val_auroc: val.auroc.mean,
            lr,
            gumbel_tau: tau,
        };
        on_epoch(&record);
        history.push(record);
        if best
            .as_ref()
            .is_none_or(|(acc, _, _)| record.val_acc > *acc)
        {
            best = Some((record.val_acc, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}
