use rand::seq::index;
use rand::Rng;

use super::manifest::{Manifest, SILENCE_LABEL};
use super::split::Split;
use crate::error::{Error, Result};

/// Shape of an N-way M-shot open-set episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    /// Known classes (N).
    pub n_way: usize,
    /// Support samples per known class (M).
    pub n_shot: usize,
    /// Open-set classes (N_U).
    pub n_open: usize,
    /// Queries per class, known and open alike (M_Q).
    pub n_query: usize,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.n_shot == 0 || self.n_open == 0 || self.n_query == 0 {
            return Err(Error::Config(format!(
                "episode counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn support_size(&self) -> usize {
        self.n_way * self.n_shot
    }

    pub fn query_size(&self) -> usize {
        (self.n_way + self.n_open) * self.n_query
    }
}

/// Entry indices (into the manifest) of one sampled episode. Known class `n`
/// has label `n`; every open query carries the dummy label `n_way`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub known_classes: Vec<String>,
    pub open_classes: Vec<String>,
    /// `support[n]` holds the M support entries of known class `n`.
    pub support: Vec<Vec<usize>>,
    /// `known_queries[n]` holds the M_Q queries of known class `n`.
    pub known_queries: Vec<Vec<usize>>,
    /// `open_queries[u]` holds the M_Q queries of open class `u`.
    pub open_queries: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.known_classes.len()
    }

    /// All entries in batch order: supports, known queries, open queries,
    /// each class-major.
    pub fn batch_order(&self) -> Vec<usize> {
        self.support
            .iter()
            .chain(&self.known_queries)
            .chain(&self.open_queries)
            .flatten()
            .copied()
            .collect()
    }

    pub fn support_len(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    pub fn known_query_len(&self) -> usize {
        self.known_queries.iter().map(Vec::len).sum()
    }

    pub fn open_query_len(&self) -> usize {
        self.open_queries.iter().map(Vec::len).sum()
    }

    /// Labels of the known queries followed by the open queries, in batch
    /// order. Open queries get the dummy label `n_way`.
    pub fn query_labels(&self) -> Vec<usize> {
        let mut labels = Vec::with_capacity(self.known_query_len() + self.open_query_len());
        for (n, q) in self.known_queries.iter().enumerate() {
            labels.extend(std::iter::repeat(n).take(q.len()));
        }
        labels.extend(std::iter::repeat(self.n_way()).take(self.open_query_len()));
        labels
    }
}

/// Per-split class index for repeated episode sampling.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    split: Split,
    classes: Vec<(String, Vec<usize>)>,
    silence: Vec<usize>,
}

impl EpisodeSampler {
    pub fn new(manifest: &Manifest, split: Split) -> Self {
        let classes = manifest
            .classes(split)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            split,
            classes,
            silence: manifest.silence(split),
        }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Known classes are drawn uniformly from the keyword classes, never
    /// silence; open classes are drawn uniformly from the remaining keyword
    /// classes plus silence.
    pub fn sample<R: Rng + ?Sized>(&self, cfg: &EpisodeConfig, rng: &mut R) -> Result<Episode> {
        cfg.validate()?;
        let n_kw = self.classes.len();
        let has_silence = !self.silence.is_empty();
        if n_kw < cfg.n_way {
            return Err(Error::InsufficientClasses {
                split: self.split,
                needed: cfg.n_way,
                available: n_kw,
            });
        }
        let open_pool = n_kw - cfg.n_way + usize::from(has_silence);
        if open_pool < cfg.n_open {
            return Err(Error::InsufficientClasses {
                split: self.split,
                needed: cfg.n_way + cfg.n_open,
                available: n_kw + usize::from(has_silence),
            });
        }

        let known: Vec<usize> = index::sample(rng, n_kw, cfg.n_way).into_vec();
        // candidate open classes: remaining keywords in name order, then
        // silence encoded as `n_kw`
        let mut candidates: Vec<usize> = (0..n_kw).filter(|c| !known.contains(c)).collect();
        if has_silence {
            candidates.push(n_kw);
        }
        let open: Vec<usize> = index::sample(rng, candidates.len(), cfg.n_open)
            .into_iter()
            .map(|i| candidates[i])
            .collect();

        let mut episode = Episode {
            known_classes: Vec::with_capacity(cfg.n_way),
            open_classes: Vec::with_capacity(cfg.n_open),
            support: Vec::with_capacity(cfg.n_way),
            known_queries: Vec::with_capacity(cfg.n_way),
            open_queries: Vec::with_capacity(cfg.n_open),
        };
        for &c in &known {
            let (name, members) = &self.classes[c];
            let picked = draw(rng, name, members, cfg.n_shot + cfg.n_query)?;
            episode.known_classes.push(name.clone());
            episode.support.push(picked[..cfg.n_shot].to_vec());
            episode.known_queries.push(picked[cfg.n_shot..].to_vec());
        }
        for &c in &open {
            let (name, members) = if c == n_kw {
                (SILENCE_LABEL, &self.silence)
            } else {
                (self.classes[c].0.as_str(), &self.classes[c].1)
            };
            episode.open_classes.push(name.to_string());
            episode
                .open_queries
                .push(draw(rng, name, members, cfg.n_query)?);
        }
        Ok(episode)
    }
}

fn draw<R: Rng + ?Sized>(
    rng: &mut R,
    class: &str,
    members: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if members.len() < k {
        return Err(Error::InsufficientSamples {
            class: class.to_string(),
            needed: k,
            available: members.len(),
        });
    }
    Ok(index::sample(rng, members.len(), k)
        .into_iter()
        .map(|i| members[i])
        .collect())
}

/// One-shot convenience over [`EpisodeSampler`].
pub fn sample_episode<R: Rng + ?Sized>(
    manifest: &Manifest,
    split: Split,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    EpisodeSampler::new(manifest, split).sample(cfg, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ManifestEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    /// Ten keyword classes plus silence in the test split.
    fn test_split_manifest(per_class: usize) -> Manifest {
        let mut e = Vec::new();
        for c in 0..10 {
            for i in 0..per_class {
                e.push(ManifestEntry {
                    path: format!("kw{c}/{i}.wav").into(),
                    keyword: format!("kw{c}"),
                    split: Split::Test,
                    is_silence: false,
                    crop_offset: None,
                });
            }
        }
        for i in 0..per_class {
            e.push(ManifestEntry {
                path: "noise.wav".into(),
                keyword: SILENCE_LABEL.into(),
                split: Split::Test,
                is_silence: true,
                crop_offset: Some(i),
            });
        }
        Manifest::new(e)
    }

    const FIVE_FIVE: EpisodeConfig = EpisodeConfig {
        n_way: 5,
        n_shot: 5,
        n_open: 5,
        n_query: 15,
    };

    #[test]
    fn episode_counts() {
        let m = test_split_manifest(30);
        let ep = sample_episode(
            &m,
            Split::Test,
            &FIVE_FIVE,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(ep.support_len(), 25);
        assert_eq!(ep.known_query_len() + ep.open_query_len(), 150);
        assert_eq!(ep.batch_order().len(), 175);
        assert_eq!(ep.query_labels().iter().filter(|&&l| l == 5).count(), 75);
    }

    #[test]
    fn silence_never_known_and_sets_disjoint() {
        let m = test_split_manifest(30);
        let sampler = EpisodeSampler::new(&m, Split::Test);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2_000 {
            let ep = sampler.sample(&FIVE_FIVE, &mut rng).unwrap();
            assert!(!ep.known_classes.iter().any(|c| c == SILENCE_LABEL));
            assert!(ep
                .known_classes
                .iter()
                .all(|c| !ep.open_classes.contains(c)));
            let all = ep.batch_order();
            assert_eq!(all.iter().collect::<HashSet<_>>().len(), all.len());
        }
    }

    #[test]
    fn ten_way_leaves_only_silence_for_the_open_set() {
        let m = test_split_manifest(30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = EpisodeConfig {
            n_way: 10,
            n_shot: 1,
            n_open: 1,
            n_query: 2,
        };
        let ep = sample_episode(&m, Split::Test, &one, &mut rng).unwrap();
        assert_eq!(ep.open_classes, vec![SILENCE_LABEL.to_string()]);
        let two = EpisodeConfig { n_open: 2, ..one };
        assert!(matches!(
            sample_episode(&m, Split::Test, &two, &mut rng),
            Err(Error::InsufficientClasses { .. })
        ));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let m = test_split_manifest(10);
        let r = sample_episode(
            &m,
            Split::Test,
            &FIVE_FIVE,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::InsufficientSamples { .. })));
        let r = sample_episode(
            &m,
            Split::Train,
            &FIVE_FIVE,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::InsufficientClasses { .. })));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let m = test_split_manifest(30);
        let a = sample_episode(
            &m,
            Split::Test,
            &FIVE_FIVE,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = sample_episode(
            &m,
            Split::Test,
            &FIVE_FIVE,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
