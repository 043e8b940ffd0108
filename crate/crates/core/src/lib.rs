//! Bayesian hierarchical estimation and probabilistic projection of total
//! fertility rates with a three-phase transition model.
//!
//! The usual flow is [`data::parse_tfr_csv`] → [`pipeline::fit`] →
//! [`projection::project`], with [`validation`] scoring the fits.

pub mod cli;
pub mod data;
pub mod error;
pub mod kernel;
pub mod mcmc;
pub mod pipeline;
pub mod projection;
pub mod rng;
pub mod synthetic;
pub mod validation;

pub use data::{parse_tfr_csv, DataStore, Mode, PhaseSegmentation, PoolCriterion, TfrSeries};
pub use error::{Error, Result};
pub use kernel::{double_logistic_decrement, Phase2Params, Phase3Params, VarianceParams};
pub use pipeline::{fit, FitConfig, FitResult};
pub use projection::{project, ProjectionConfig, ProjectionResult};
