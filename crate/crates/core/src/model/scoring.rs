//! Tape-free scoring: prototypes, dummy selection and the N+1 posterior on
//! plain embeddings.

use rand::Rng;

use super::config::ScoringConfig;
use crate::error::{Error, Result};
use crate::numerics::{sqdist, Tensor};

/// Mean embedding per class. `labels[i]` is the class of row `i` of
/// `embeddings`; every class in `0..n_way` must occur.
pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize], n_way: usize) -> Result<Tensor> {
    let (n, d) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(
            "compute_prototypes",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut sums = vec![0.0; n_way * d];
    let mut counts = vec![0usize; n_way];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_way {
            return Err(Error::shape(
                "compute_prototypes",
                format!("label {y} outside {n_way} classes"),
            ));
        }
        counts[y] += 1;
        sums[y * d..(y + 1) * d]
            .iter_mut()
            .zip(embeddings.row(i))
            .for_each(|(s, v)| *s += v);
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::shape(
            "compute_prototypes",
            format!("class {missing} has no support embedding"),
        ));
    }
    for (row, &c) in sums.chunks_mut(d).zip(&counts) {
        row.iter_mut().for_each(|v| *v /= c as f64);
    }
    Tensor::new(vec![n_way, d], sums)
}

/// Inverse CDF of the standard Gumbel distribution.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `n` i.i.d. standard Gumbel draws.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break gumbel_from_uniform(u);
            }
        })
        .collect()
}

/// Dummy selection mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection<'a> {
    /// Gumbel-softmax mixture with the given per-dummy noise.
    Gumbel { tau: f64, noise: &'a [f64] },
    /// Noise-free argmax; ties go to the lowest index.
    Argmax { tau: f64 },
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Lowest index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks the query's dummy from the `L×D` candidates. Returns the selected
/// (or mixed) dummy and the selection probabilities.
pub fn select_dummy(
    query: &[f64],
    dummies: &Tensor,
    selection: Selection<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (l, d) = dummies.dims2()?;
    if query.len() != d {
        return Err(Error::shape(
            "select_dummy",
            format!("query width {} vs dummy width {d}", query.len()),
        ));
    }
    let dist: Vec<f64> = (0..l).map(|i| sqdist(query, dummies.row(i))).collect();
    match selection {
        Selection::Gumbel { tau, noise } => {
            if noise.len() != l || !(tau > 0.0) {
                return Err(Error::shape(
                    "select_dummy",
                    format!("{} noise draws for {l} dummies, tau {tau}", noise.len()),
                ));
            }
            let p = softmax(
                &dist
                    .iter()
                    .zip(noise)
                    .map(|(di, e)| (-di + e) / tau)
                    .collect::<Vec<_>>(),
            );
            let mut mixed = vec![0.0; d];
            for (i, &pi) in p.iter().enumerate() {
                mixed
                    .iter_mut()
                    .zip(dummies.row(i))
                    .for_each(|(m, v)| *m += pi * v);
            }
            Ok((mixed, p))
        }
        Selection::Argmax { tau } => {
            if !(tau > 0.0) {
                return Err(Error::shape("select_dummy", format!("tau {tau}")));
            }
            let p = softmax(&dist.iter().map(|di| -di / tau).collect::<Vec<_>>());
            Ok((dummies.row(argmax(&p)).to_vec(), p))
        }
    }
}

/// Posterior over the known classes, plus the dummy class last when `dummy`
/// is given: `softmax(-d(q, c_n) / tau_n)` with the dummy's temperature
/// scaled by gamma.
pub fn posterior(
    query: &[f64],
    prototypes: &Tensor,
    dummy: Option<&[f64]>,
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let (n, d) = prototypes.dims2()?;
    if query.len() != d || dummy.is_some_and(|c| c.len() != d) {
        return Err(Error::shape(
            "posterior",
            format!("query/dummy width vs prototype width {d}"),
        ));
    }
    let mut logits: Vec<f64> = (0..n)
        .map(|i| -sqdist(query, prototypes.row(i)) / cfg.tau_known)
        .collect();
    if let Some(c) = dummy {
        logits.push(-sqdist(query, c) / cfg.tau_dummy());
    }
    Ok(softmax(&logits))
}
