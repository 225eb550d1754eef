//! Dense `f64` tensors, a reverse-mode tape over the kernels the model needs,
//! finite-difference gradient checking and the checkpoint file format.

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, Probe};
pub use params::ParamStore;
pub use tape::{BatchStats, Fault, Norm, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sqdist;

#[cfg(test)]
mod tests;
