//! Algorithm variants and run configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::StepSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("{variant} requires {requirement}")]
    Inconsistent {
        variant: Variant,
        requirement: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown algorithm {0:?}")]
    UnknownVariant(String),
}

/// The members of the two-timescale EM family plus the deterministic baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "EM")]
    Em,
    #[serde(rename = "iEM")]
    IEm,
    #[serde(rename = "MCEM")]
    Mcem,
    #[serde(rename = "SAEM")]
    Saem,
    #[serde(rename = "iSAEM")]
    ISaem,
    #[serde(rename = "vrTTEM")]
    VrTtem,
    #[serde(rename = "fiTTEM")]
    FiTtem,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Em,
        Variant::IEm,
        Variant::Mcem,
        Variant::Saem,
        Variant::ISaem,
        Variant::VrTtem,
        Variant::FiTtem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Em => "EM",
            Variant::IEm => "iEM",
            Variant::Mcem => "MCEM",
            Variant::Saem => "SAEM",
            Variant::ISaem => "iSAEM",
            Variant::VrTtem => "vrTTEM",
            Variant::FiTtem => "fiTTEM",
        }
    }

    /// One full pass per iteration.
    pub fn is_batch(self) -> bool {
        matches!(self, Variant::Em | Variant::Mcem | Variant::Saem)
    }

    pub fn is_incremental(self) -> bool {
        !self.is_batch()
    }

    /// Variants whose proxy is the per-sample table mean (SAGA-like bookkeeping).
    pub fn uses_table(self) -> bool {
        matches!(self, Variant::IEm | Variant::ISaem | Variant::FiTtem)
    }

    pub fn requires_exact_estep(self) -> bool {
        matches!(self, Variant::Em | Variant::IEm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| ConfigError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    /// SA-step stepsizes.
    pub gamma: StepSchedule,
    /// Constant Inc-step stepsize.
    pub rho: f64,
    /// Posterior draws per MC-step.
    pub mc_samples: usize,
    /// vrTTEM epoch length `m`.
    pub epoch_len: usize,
    /// Number of iterations `K_f`.
    pub total_iters: u64,
    pub seed: u64,
    pub randomized_termination: bool,
    /// Replace the MC-step with the closed-form conditional expectation.
    pub exact_estep: bool,
    /// Evaluate the penalized NLL on recorded CSV rows when the model supports it.
    pub track_nll: bool,
}

impl RunConfig {
    /// Defaults for a run over `n` samples lasting `epochs` passes.
    ///
    /// `gamma`: 1 for the EM/iEM/MCEM baselines, otherwise `1/(k+1)^0.5` after
    /// a one-epoch warmup. `rho`: `n^(-2/3)` for vrTTEM/fiTTEM, 1 otherwise.
    pub fn defaults(variant: Variant, n: usize, epochs: f64) -> Self {
        let n = n.max(1);
        let gamma = match variant {
            Variant::Em | Variant::IEm | Variant::Mcem => StepSchedule::one(),
            v => StepSchedule::WarmupPolynomial {
                value: 1.0,
                exponent: 0.5,
                warmup_iters: if v.is_batch() { 1 } else { n as u64 },
            },
        };
        let rho = match variant {
            Variant::VrTtem | Variant::FiTtem => default_rho(n),
            _ => 1.0,
        };
        RunConfig {
            variant,
            gamma,
            rho,
            mc_samples: 10,
            epoch_len: n,
            total_iters: total_iters_for(variant, n, epochs),
            seed: 0,
            randomized_termination: false,
            exact_estep: variant.requires_exact_estep(),
            track_nll: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.variant;
        self.gamma.validate()?;
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(ConfigError::Invalid(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.mc_samples == 0 {
            return Err(ConfigError::Invalid("mc_samples must be positive".into()));
        }
        if self.randomized_termination && self.total_iters == 0 {
            return Err(ConfigError::Invalid(
                "randomized termination needs at least one iteration".into(),
            ));
        }
        let inconsistent = |requirement| Err(ConfigError::Inconsistent { variant: v, requirement });
        match v {
            Variant::Em | Variant::IEm => {
                if !self.exact_estep {
                    return inconsistent("the exact E-step");
                }
                if !self.gamma.is_identically_one() {
                    return inconsistent("gamma = 1");
                }
                if self.rho != 1.0 {
                    return inconsistent("rho = 1");
                }
            }
            Variant::Mcem => {
                if !self.gamma.is_identically_one() {
                    return inconsistent("gamma = 1");
                }
                if self.rho != 1.0 {
                    return inconsistent("rho = 1");
                }
            }
            Variant::Saem | Variant::ISaem => {
                if self.rho != 1.0 {
                    return inconsistent("rho = 1");
                }
            }
            Variant::VrTtem => {
                if self.epoch_len == 0 {
                    return inconsistent("epoch_len >= 1");
                }
            }
            Variant::FiTtem => {}
        }
        Ok(())
    }
}

/// `n^(-2/3)`, the constant Inc-step size used for vrTTEM and fiTTEM.
pub fn default_rho(n: usize) -> f64 {
    (n.max(1) as f64).powf(-2.0 / 3.0).min(1.0)
}

/// `ceil(epochs * n)` for incremental variants, `ceil(epochs)` for batch ones.
pub fn total_iters_for(variant: Variant, n: usize, epochs: f64) -> u64 {
    let epochs = epochs.max(0.0);
    if variant.is_batch() {
        epochs.ceil() as u64
    } else {
        (epochs * n as f64).ceil() as u64
    }
}
