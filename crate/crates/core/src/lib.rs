//! Dummy prototypical networks for few-shot open-set recognition.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`numerics`]), log-mel front end and input normalization ([`features`]),
//! the class-split keyword corpus and episode sampler ([`dataset`]), the
//! encoder with its episode-conditioned dummy prototypes ([`model`]),
//! episodic training ([`training`]) and open-set evaluation ([`eval`]).

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use numerics::{Tape, Tensor, Var};
