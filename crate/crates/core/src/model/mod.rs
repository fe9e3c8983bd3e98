//! The latent ODE model: a backwards-in-time recurrent encoder produces a
//! Gaussian posterior over the initial latent state, a learned vector field
//! carries it forward, and small networks decode features and the outcome.

mod dynamics;
mod latent;
mod params;
mod series;

pub use dynamics::LatentDynamics;
pub use latent::{
    classify, classify_state, decode, encode, evolve, integrate_latent, reparameterize, sample_z0, standard_normals,
    LatentPath, LatentPosterior, Reconstruction, LOG_STD_MAX, LOG_STD_MIN,
};
pub(crate) use latent::encode_on_tape;
pub use params::{Architecture, GruCell, GruVars, Linear, LinearVars, Mlp, MlpVars, ModelParams, ModelVars, Section};
pub use series::{IrregularSeries, NormStats, SeriesDocument};

#[cfg(test)]
pub(crate) use series::tests::tiny_series;
