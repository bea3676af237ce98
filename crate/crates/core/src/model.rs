//! The interface a latent-variable model implements to plug into the engine.

use rand::RngCore;
use thiserror::Error;

use crate::stats::StatVec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite log-density ({0})")]
    NonFiniteDensity(String),
    #[error("statistics outside the valid region: {0}")]
    InvalidStatistics(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid latent value: {0}")]
    InvalidLatent(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
}

/// A curved-exponential-family latent variable model bound to its dataset.
///
/// Statistics are flat vectors of length [`stat_dim`](LatentModel::stat_dim);
/// each implementation documents its own layout.
pub trait LatentModel {
    type Params: Clone + std::fmt::Debug;
    /// One latent draw. Also used as the persistent chain state for
    /// MCMC-based samplers.
    type Latent: Clone + std::fmt::Debug;

    fn n_samples(&self) -> usize;

    fn stat_dim(&self) -> usize;

    /// Column names for [`param_values`](LatentModel::param_values).
    fn param_names(&self) -> Vec<String>;

    /// Flat, reportable view of a parameter value.
    fn param_values(&self, theta: &Self::Params) -> Vec<f64>;

    /// Starting state of sample `i`'s chain. Exact samplers may ignore it.
    fn initial_latent(&self, i: usize, theta: &Self::Params) -> Self::Latent;

    /// `draws` samples from `p(z_i | y_i; theta)`. `chain` is the warm-start
    /// state and is updated in place.
    fn sample_posterior(
        &self,
        i: usize,
        theta: &Self::Params,
        draws: usize,
        chain: &mut Self::Latent,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Self::Latent>, ModelError>;

    fn suff_stat(&self, i: usize, z: &Self::Latent) -> StatVec;

    /// `E[S(z_i, y_i) | y_i; theta]` when available in closed form.
    fn exact_expectation(&self, _i: usize, _theta: &Self::Params) -> Option<StatVec> {
        None
    }

    /// The M-step map `s -> theta_bar(s)`. Must be deterministic.
    fn m_step(&self, s: &StatVec) -> Result<Self::Params, ModelError>;

    /// Penalized negative log-likelihood, when tractable.
    fn penalized_nll(&self, _theta: &Self::Params) -> Option<f64> {
        None
    }

    fn has_exact_expectation(&self) -> bool {
        false
    }
}
