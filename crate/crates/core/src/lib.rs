pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod odeint;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
