//! Variational training of the latent ODE.

mod elbo;
mod optim;
mod train;

pub use elbo::{elbo, elbo_with_grad, sample_noise, ElboConfig, ElboParts, GradientPath};
pub use optim::{clip_global_norm, Adam};
pub use train::{train, train_with_callback, EpochRecord, TrainConfig, TrainOutcome, TrainReport, FRACTIONS};
