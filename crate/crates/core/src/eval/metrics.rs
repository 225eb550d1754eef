use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Open-set score; for every rule a higher value means "more likely
/// unknown".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// Posterior probability of the dummy class.
    DummyProb,
    /// `1 - max_n p(y = n | x)` over the known classes.
    MaxProbComplement,
    /// Distance to the nearest known prototype.
    NegMinDistance,
    /// Negated distance to the selected dummy.
    NegDummyDistance,
}

impl ScoreRule {
    pub const ALL: [ScoreRule; 4] = [
        ScoreRule::DummyProb,
        ScoreRule::MaxProbComplement,
        ScoreRule::NegMinDistance,
        ScoreRule::NegDummyDistance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreRule::DummyProb => "dummy_prob",
            ScoreRule::MaxProbComplement => "max_prob_complement",
            ScoreRule::NegMinDistance => "neg_min_distance",
            ScoreRule::NegDummyDistance => "neg_dummy_distance",
        }
    }

    pub fn needs_dummy(self) -> bool {
        matches!(self, ScoreRule::DummyProb | ScoreRule::NegDummyDistance)
    }
}

impl fmt::Display for ScoreRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreRule::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown score rule `{s}` (expected one of dummy_prob, max_prob_complement, neg_min_distance, neg_dummy_distance)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpenSetScore {
    pub rule: ScoreRule,
    pub value: f64,
}

/// Inputs every score rule is computed from, for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryView<'a> {
    /// Posterior over the N known classes, followed by the dummy if present.
    pub posterior: &'a [f64],
    pub n_way: usize,
    /// Squared distances to the N prototypes.
    pub known_distances: &'a [f64],
    /// Squared distance to the selected dummy.
    pub dummy_distance: Option<f64>,
}

impl OpenSetScore {
    pub fn compute(rule: ScoreRule, q: &QueryView<'_>) -> Result<Self> {
        let missing = || Error::Config(format!("score rule `{rule}` needs a model with dummies"));
        let value = match rule {
            ScoreRule::DummyProb => {
                if q.posterior.len() != q.n_way + 1 {
                    return Err(missing());
                }
                q.posterior[q.n_way]
            }
            ScoreRule::MaxProbComplement => {
                1.0 - q.posterior[..q.n_way]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            }
            ScoreRule::NegMinDistance => q
                .known_distances
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min),
            ScoreRule::NegDummyDistance => -q.dummy_distance.ok_or_else(missing)?,
        };
        Ok(Self { rule, value })
    }
}

/// Index (0-based) of the most probable known class; the dummy, if present
/// past `n_way`, is ignored. Ties go to the lowest index.
pub fn classify(posterior: &[f64], n_way: usize) -> usize {
    crate::model::argmax(&posterior[..n_way])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Known,
    Unknown,
}

/// Unknown iff the score strictly exceeds `delta`.
pub fn openset_decide(score: &OpenSetScore, delta: f64) -> Decision {
    if score.value > delta {
        Decision::Unknown
    } else {
        Decision::Known
    }
}

/// Area under the ROC curve: the probability that an unknown score beats a
/// known score, ties counting one half. Computed from rank sums.
pub fn auroc(known: &[f64], unknown: &[f64]) -> Result<f64> {
    if known.is_empty() || unknown.is_empty() {
        return Err(Error::Scores(format!(
            "AUROC needs both classes, got {} known and {} unknown scores",
            known.len(),
            unknown.len()
        )));
    }
    if known.iter().chain(unknown).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    let mut all: Vec<(f64, bool)> = known
        .iter()
        .map(|&v| (v, false))
        .chain(unknown.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (nk, nu) = (known.len() as f64, unknown.len() as f64);
    Ok((rank_sum - nu * (nu + 1.0) / 2.0) / (nk * nu))
}

/// Mean, sample standard deviation and 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                ci95: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
        }
    }
}
