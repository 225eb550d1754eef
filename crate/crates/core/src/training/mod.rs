//! Episode objective, Adam, learning-rate and Gumbel-temperature schedules,
//! and the episodic training loop with validation-based model selection.

mod adam;
mod loss;
mod schedule;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use loss::{dual_cross_entropy, episode_loss, EpisodeLayout, LossConfig};
pub use schedule::{gumbel_tau_at, lr_at, GumbelSchedule, LrSchedule};
pub use trainer::{episode_seed, train, EpochRecord, TrainConfig, TrainOutcome};
