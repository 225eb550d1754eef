use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{auroc, classify, OpenSetScore, QueryView, ScoreRule, Stat};
use crate::dataset::{Episode, EpisodeConfig, EpisodeSampler, FeatureLoader, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{compute_prototypes, posterior, select_dummy, Model, Selection};
use crate::numerics::{sqdist, Tensor};
use crate::rng;

/// Feature batch size used when embedding a split.
const EMBED_CHUNK: usize = 64;

/// Eval-mode embeddings of every entry of one split. Encoding is
/// deterministic per utterance, so episodes only need table lookups.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    rows: HashMap<usize, usize>,
    embeddings: Tensor,
}

impl SplitEmbeddings {
    pub fn compute(
        model: &Model,
        manifest: &Manifest,
        split: Split,
        loader: &FeatureLoader,
    ) -> Result<Self> {
        let indices: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest.entry(i).split == split)
            .collect();
        if indices.is_empty() {
            return Err(Error::EmptySplit(split));
        }
        let d = model.embedding_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for chunk in indices.chunks(EMBED_CHUNK) {
            let x = loader.batch::<rng::Rng>(manifest, chunk, None)?;
            data.extend_from_slice(model.encode(&x)?.data());
        }
        Ok(Self {
            rows: indices.iter().enumerate().map(|(r, &i)| (i, r)).collect(),
            embeddings: Tensor::new(vec![indices.len(), d], data)?,
        })
    }

    /// Embedding of manifest entry `entry`.
    pub fn get(&self, entry: usize) -> Result<&[f64]> {
        let r = self.rows.get(&entry).ok_or_else(|| {
            Error::shape(
                "embeddings",
                format!("entry {entry} is not in the embedded split"),
            )
        })?;
        Ok(self.embeddings.row(*r))
    }
}

/// Raw outcome of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScores {
    /// Predicted class per known query, in episode order.
    pub predictions: Vec<usize>,
    /// True class per known query.
    pub labels: Vec<usize>,
    /// Open-set scores of the known queries.
    pub known_scores: Vec<f64>,
    /// Open-set scores of the open queries.
    pub open_scores: Vec<f64>,
}

impl EpisodeScores {
    pub fn accuracy(&self) -> f64 {
        let hits = self
            .predictions
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| p == y)
            .count();
        hits as f64 / self.labels.len() as f64
    }

    pub fn auroc(&self) -> Result<f64> {
        auroc(&self.known_scores, &self.open_scores)
    }
}

/// Scores one episode with a frozen model: prototypes from the supports,
/// noise-free argmax dummy selection, posterior and open-set score per query.
pub fn score_episode(
    model: &Model,
    emb: &SplitEmbeddings,
    episode: &Episode,
    rule: ScoreRule,
) -> Result<EpisodeScores> {
    let n_way = episode.n_way();
    let mut support = Vec::new();
    let mut labels = Vec::new();
    for (n, members) in episode.support.iter().enumerate() {
        for &i in members {
            support.push(emb.get(i)?.to_vec());
            labels.push(n);
        }
    }
    let protos = compute_prototypes(&Tensor::from_rows(&support)?, &labels, n_way)?;
    let dummies = model.generate_dummies(&protos)?;
    let scoring = model.config().scoring;
    let score = |entry: usize| -> Result<(usize, f64)> {
        let q = emb.get(entry)?;
        let known_distances: Vec<f64> = (0..n_way).map(|n| sqdist(q, protos.row(n))).collect();
        let dummy = match &dummies {
            Some(d) => Some(select_dummy(q, d, Selection::Argmax { tau: 1.0 })?.0),
            None => None,
        };
        let p = posterior(q, &protos, dummy.as_deref(), &scoring)?;
        let view = QueryView {
            posterior: &p,
            n_way,
            known_distances: &known_distances,
            dummy_distance: dummy.as_deref().map(|c| sqdist(q, c)),
        };
        Ok((
            classify(&p, n_way),
            OpenSetScore::compute(rule, &view)?.value,
        ))
    };
    let mut out = EpisodeScores {
        predictions: Vec::new(),
        labels: Vec::new(),
        known_scores: Vec::new(),
        open_scores: Vec::new(),
    };
    for (n, members) in episode.known_queries.iter().enumerate() {
        for &i in members {
            let (pred, s) = score(i)?;
            out.predictions.push(pred);
            out.labels.push(n);
            out.known_scores.push(s);
        }
    }
    for &i in episode.open_queries.iter().flatten() {
        out.open_scores.push(score(i)?.1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub accuracy: f64,
    pub auroc: f64,
}

/// Aggregate of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub rule: ScoreRule,
    pub n_way: usize,
    pub n_shot: usize,
    pub n_open: usize,
    pub n_query: usize,
    pub seed: u64,
    pub episodes: usize,
    pub accuracy: Stat,
    pub auroc: Stat,
    pub records: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One `episode,accuracy,auroc` row per episode.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,accuracy,auroc\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.episode, r.accuracy, r.auroc);
        }
        out
    }
}

/// Samples `n_episodes` seeded episodes from `split` and aggregates the
/// outcome of `scorer` on each. Episode `i` draws from its own stream, so
/// results do not depend on evaluation order.
pub fn evaluate_episodes<F>(
    manifest: &Manifest,
    split: Split,
    cfg: &EpisodeConfig,
    n_episodes: usize,
    rule: ScoreRule,
    seed: u64,
    mut scorer: F,
) -> Result<EvalReport>
where
    F: FnMut(&Episode) -> Result<EpisodeScores>,
{
    if n_episodes == 0 {
        return Err(Error::Config(
            "evaluation needs at least one episode".into(),
        ));
    }
    let sampler = EpisodeSampler::new(manifest, split);
    let mut records = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let episode =
            sampler.sample(cfg, &mut rng::indexed_stream(seed, rng::SAMPLER, i as u64))?;
        let s = scorer(&episode)?;
        records.push(EpisodeRecord {
            episode: i,
            accuracy: s.accuracy(),
            auroc: s.auroc()?,
        });
    }
    let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let roc: Vec<f64> = records.iter().map(|r| r.auroc).collect();
    Ok(EvalReport {
        split: split.to_string(),
        rule,
        n_way: cfg.n_way,
        n_shot: cfg.n_shot,
        n_open: cfg.n_open,
        n_query: cfg.n_query,
        seed,
        episodes: n_episodes,
        accuracy: Stat::of(&acc),
        auroc: Stat::of(&roc),
        records,
    })
}

/// Few-shot accuracy and AUROC of a frozen model over seeded episodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    manifest: &Manifest,
    split: Split,
    cfg: &EpisodeConfig,
    n_episodes: usize,
    rule: ScoreRule,
    seed: u64,
    loader: &FeatureLoader,
) -> Result<EvalReport> {
    if rule.needs_dummy() && model.config().is_baseline() {
        return Err(Error::Config(format!(
            "score rule `{rule}` needs a model with dummies"
        )));
    }
    let emb = SplitEmbeddings::compute(model, manifest, split, loader)?;
    evaluate_episodes(manifest, split, cfg, n_episodes, rule, seed, |ep| {
        score_episode(model, &emb, ep, rule)
    })
}

/// Across-seed summary of several runs (mean and std of the per-run means),
/// alongside the average within-run std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub accuracy: Stat,
    pub auroc: Stat,
    pub mean_episode_accuracy_std: f64,
    pub mean_episode_auroc_std: f64,
}

impl TrialSummary {
    pub fn of(reports: &[EvalReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let col = |f: fn(&EvalReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        Self {
            trials: reports.len(),
            accuracy: Stat::of(&col(|r| r.accuracy.mean)),
            auroc: Stat::of(&col(|r| r.auroc.mean)),
            mean_episode_accuracy_std: col(|r| r.accuracy.std).iter().sum::<f64>() / n,
            mean_episode_auroc_std: col(|r| r.auroc.std).iter().sum::<f64>() / n,
        }
    }
}
