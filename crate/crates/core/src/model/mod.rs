//! Conv4 encoder, prototypes, the DeepSets dummy generator, Gumbel dummy
//! selection and the N+1 posterior.

mod config;
mod network;
mod scoring;

pub use config::{EncoderConfig, GeneratorConfig, ModelConfig, ScoringConfig, CONV_BLOCKS};
pub use network::{Bound, Mode, Model};
pub use scoring::{
    argmax, compute_prototypes, gumbel_from_uniform, posterior, sample_gumbel, select_dummy,
    Selection,
};
