pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod perturbation;
pub mod plot;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
