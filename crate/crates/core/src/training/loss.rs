use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::model::{Bound, Mode, Model, Selection};
use crate::numerics::{BatchStats, Tape, Tensor, Var};

/// Weight of the open-query loss against the known-query loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Row layout of an episode batch: supports first, then known queries, then
/// open queries (when included), each class-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeLayout {
    /// Batch rows of each known class's supports.
    pub support: Vec<Vec<usize>>,
    pub known_queries: Vec<usize>,
    pub known_labels: Vec<usize>,
    pub open_queries: Vec<usize>,
}

impl EpisodeLayout {
    /// Layout plus the manifest entries of every batch row.
    pub fn of(episode: &Episode, include_open: bool) -> (Self, Vec<usize>) {
        let mut entries = Vec::new();
        let mut support = Vec::with_capacity(episode.n_way());
        for members in &episode.support {
            support.push((entries.len()..entries.len() + members.len()).collect());
            entries.extend_from_slice(members);
        }
        let mut known_queries = Vec::new();
        let mut known_labels = Vec::new();
        for (n, members) in episode.known_queries.iter().enumerate() {
            for &i in members {
                known_queries.push(entries.len());
                known_labels.push(n);
                entries.push(i);
            }
        }
        let mut open_queries = Vec::new();
        if include_open {
            for &i in episode.open_queries.iter().flatten() {
                open_queries.push(entries.len());
                entries.push(i);
            }
        }
        (
            Self {
                support,
                known_queries,
                known_labels,
                open_queries,
            },
            entries,
        )
    }

    pub fn n_way(&self) -> usize {
        self.support.len()
    }
}

/// `L^K + lambda * L^U` from a log-posterior whose first rows are the known
/// queries (labels `known_labels`) and whose last `n_open` rows are open
/// queries (label `dummy`). Both terms are per-query means.
pub fn dual_cross_entropy(
    tape: &mut Tape,
    log_posterior: Var,
    known_labels: &[usize],
    n_open: usize,
    dummy: usize,
    lambda: f64,
) -> Result<Var> {
    if known_labels.is_empty() {
        return Err(Error::Config(
            "episode loss needs at least one known query".into(),
        ));
    }
    let k = known_labels.len();
    let rows = tape.value(log_posterior).shape()[0];
    if rows != k + n_open {
        return Err(Error::shape(
            "episode_loss",
            format!("{rows} posterior rows for {k} known and {n_open} open queries"),
        ));
    }
    let known_rows: Vec<usize> = (0..k).collect();
    let known = tape.gather_rows(log_posterior, &known_rows)?;
    let picked = tape.pick_per_row(known, known_labels)?;
    let mean_k = tape.mean(picked)?;
    let loss_k = tape.scale(mean_k, -1.0)?;
    if n_open == 0 || lambda == 0.0 {
        return Ok(loss_k);
    }
    let open_rows: Vec<usize> = (k..k + n_open).collect();
    let open = tape.gather_rows(log_posterior, &open_rows)?;
    let picked = tape.pick_per_row(open, &vec![dummy; n_open])?;
    let mean_u = tape.mean(picked)?;
    let loss_u = tape.scale(mean_u, -lambda)?;
    tape.add(loss_k, loss_u)
}

/// Episode objective on the tape: encodes the batch, builds the posterior
/// and applies [`dual_cross_entropy`]. For a baseline model the open rows
/// (if any) only take part in batch normalization.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    layout: &EpisodeLayout,
    features: &Tensor,
    loss: &LossConfig,
    selection: Selection<'_>,
    mode: Mode,
) -> Result<(Var, Vec<BatchStats>)> {
    loss.validate()?;
    let (emb, stats) = model.encode_graph(tape, bound, features, mode)?;
    let with_dummy = !model.config().is_baseline();
    let mut queries = layout.known_queries.clone();
    if with_dummy {
        queries.extend_from_slice(&layout.open_queries);
    }
    if layout.known_queries.is_empty() {
        return Err(Error::Config(
            "episode loss needs at least one known query".into(),
        ));
    }
    let log_post =
        model.log_posterior_graph(tape, bound, emb, &layout.support, &queries, selection)?;
    let n_open = if with_dummy {
        layout.open_queries.len()
    } else {
        0
    };
    let value = dual_cross_entropy(
        tape,
        log_post,
        &layout.known_labels,
        n_open,
        layout.n_way(),
        loss.lambda,
    )?;
    Ok((value, stats))
}
