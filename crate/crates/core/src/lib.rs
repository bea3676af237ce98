//! Two-timescale stochastic EM for curved exponential family latent variable
//! models.
//!
//! The [`engine`] drives every variant (EM, iEM, MCEM, SAEM, iSAEM, vrTTEM,
//! fiTTEM) through one loop over sufficient statistics; models plug in through
//! [`LatentModel`]. Two reference models ship in [`models`]: a penalized
//! Gaussian mixture and a one-compartment PK model with absorption lag.

pub mod config;
pub mod engine;
pub mod model;
pub mod models;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod stats;

pub use config::{ConfigError, RunConfig, Variant};
pub use engine::{run, run_with_observer, EngineError, RunOutput, Trajectory};
pub use model::{LatentModel, ModelError};
pub use rng::{Domain, SeedTree};
pub use schedule::StepSchedule;
pub use stats::{PerSampleStatTable, StatVec};
