//! Stepsize schedules for the SA-step (`gamma`) and the Inc-step (`rho`).

use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `c` at every iteration.
    Constant { value: f64 },
    /// `c / (k + 1)^a`.
    Polynomial { value: f64, exponent: f64 },
    /// `1` for `k < warmup_iters`, then `c / (k - warmup_iters + 1)^a`.
    WarmupPolynomial {
        value: f64,
        exponent: f64,
        warmup_iters: u64,
    },
}

impl StepSchedule {
    pub fn constant(value: f64) -> Result<Self, ConfigError> {
        let s = StepSchedule::Constant { value };
        s.validate()?;
        Ok(s)
    }

    pub fn polynomial(value: f64, exponent: f64) -> Result<Self, ConfigError> {
        let s = StepSchedule::Polynomial { value, exponent };
        s.validate()?;
        Ok(s)
    }

    pub fn warmup_polynomial(value: f64, exponent: f64, warmup_iters: u64) -> Result<Self, ConfigError> {
        let s = StepSchedule::WarmupPolynomial {
            value,
            exponent,
            warmup_iters,
        };
        s.validate()?;
        Ok(s)
    }

    /// The unit schedule used by the batch reductions.
    pub fn one() -> Self {
        StepSchedule::Constant { value: 1.0 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (value, exponent) = match *self {
            StepSchedule::Constant { value } => (value, None),
            StepSchedule::Polynomial { value, exponent }
            | StepSchedule::WarmupPolynomial { value, exponent, .. } => (value, Some(exponent)),
        };
        if !(value > 0.0 && value <= 1.0) {
            return Err(ConfigError::Schedule(format!(
                "schedule value must lie in (0, 1], got {value}"
            )));
        }
        if let Some(a) = exponent {
            if !(a > 0.0 && a < 1.0) {
                return Err(ConfigError::Schedule(format!(
                    "polynomial exponent must lie in (0, 1), got {a}"
                )));
            }
        }
        Ok(())
    }

    /// Stepsize at iteration `k`.
    pub fn eval(&self, k: u64) -> f64 {
        match *self {
            StepSchedule::Constant { value } => value,
            StepSchedule::Polynomial { value, exponent } => value / ((k + 1) as f64).powf(exponent),
            StepSchedule::WarmupPolynomial {
                value,
                exponent,
                warmup_iters,
            } => {
                if k < warmup_iters {
                    1.0
                } else {
                    value / ((k - warmup_iters + 1) as f64).powf(exponent)
                }
            }
        }
    }

    /// True when every evaluation returns exactly `1.0`.
    pub fn is_identically_one(&self) -> bool {
        matches!(*self, StepSchedule::Constant { value } if value == 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_schedule() {
        assert_eq!(StepSchedule::constant(1.0).unwrap().eval(37), 1.0);
    }

    #[test]
    fn polynomial_at_three() {
        let s = StepSchedule::polynomial(1.0, 0.5).unwrap();
        assert_eq!(s.eval(3), 0.5);
        assert_eq!(s.eval(0), 1.0);
    }

    #[test]
    fn warmup_window() {
        let s = StepSchedule::warmup_polynomial(1.0, 0.5, 5).unwrap();
        assert_eq!(s.eval(2), 1.0);
        assert_eq!(s.eval(4), 1.0);
        assert_eq!(s.eval(5), 1.0);
        assert_eq!(s.eval(8), 0.5);
    }

    #[test]
    fn rejects_bad_exponent() {
        assert!(StepSchedule::polynomial(1.0, 1.0).is_err());
        assert!(StepSchedule::polynomial(1.0, 0.0).is_err());
        assert!(StepSchedule::warmup_polynomial(1.0, -0.2, 3).is_err());
        assert!(StepSchedule::constant(0.0).is_err());
        assert!(StepSchedule::constant(1.5).is_err());
    }

    proptest! {
        #[test]
        fn polynomial_is_non_increasing(a in 0.01f64..0.99, c in 0.01f64..=1.0, k in 0u64..1_000_000, dk in 1u64..1_000_000) {
            let s = StepSchedule::polynomial(c, a).unwrap();
            let (g0, g1) = (s.eval(k), s.eval(k + dk));
            prop_assert!(g1 <= g0);
            prop_assert!(g1 > 0.0 && g0 <= 1.0);
        }

        #[test]
        fn warmup_polynomial_in_unit_interval(a in 0.01f64..0.99, w in 0u64..1000, k in 0u64..1_000_000) {
            let g = StepSchedule::warmup_polynomial(1.0, a, w).unwrap().eval(k);
            prop_assert!(g > 0.0 && g <= 1.0);
        }
    }
}
