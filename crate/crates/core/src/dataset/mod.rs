//! Class-disjoint keyword splits, the utterance manifest, the synthetic
//! stand-in corpus and the open-set episode sampler.

mod episode;
mod loader;
mod manifest;
mod split;
mod synth;

pub use episode::{sample_episode, Episode, EpisodeConfig, EpisodeSampler};
pub use loader::FeatureLoader;
pub use manifest::{
    add_silence, build_manifest, gsc_split_of, Manifest, ManifestEntry, SplitCounts, SILENCE_LABEL,
};
pub use split::{Split, SplitSpec};
pub use synth::{synth_corpus, ClassRecipe, SynthConfig};
