//! Posterior samplers: inverse-CDF categorical draws and random-walk
//! Metropolis–Hastings, plus a stable log-sum-exp.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("weights must be non-negative and sum to 1 (sum = {sum})")]
    NotNormalized { sum: f64 },
    #[error("log-target is not finite at the initial state ({0})")]
    NonFiniteInit(f64),
    #[error("log-target returned NaN at step {step}")]
    NanLogTarget { step: usize },
    #[error("invalid MH configuration: {0}")]
    Config(String),
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// `log(sum(exp(v)))` via max-shift. Returns `-inf` when every entry is `-inf`.
///
/// Panics on an empty slice.
pub fn logsumexp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "logsumexp of an empty sequence");
    if values.len() == 1 {
        return values[0];
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY || max.is_nan() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights in place into probabilities.
pub fn softmax_in_place(logits: &mut [f64]) {
    let lse = logsumexp(logits);
    for v in logits.iter_mut() {
        *v = (*v - lse).exp();
    }
}

/// Draws an index with probability `weights[m]` by inverting the CDF at a
/// single uniform.
pub fn categorical_sample<R: RngCore + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize, SamplerError> {
    let mut sum = 0.0;
    for &w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(SamplerError::NotNormalized { sum: f64::NAN });
        }
        sum += w;
    }
    if weights.is_empty() || (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(SamplerError::NotNormalized { sum });
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (m, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = m;
            cum += w;
            if u < cum {
                return Ok(m);
            }
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    Ok(last_positive)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhConfig {
    /// Number of MH transitions.
    pub chain_len: usize,
    /// Transitions discarded before states are reported to the visitor.
    pub burn_in: usize,
    /// Per-coordinate random-walk standard deviations.
    pub proposal_scales: Vec<f64>,
}

impl MhConfig {
    pub fn new(chain_len: usize, burn_in: usize, proposal_scales: Vec<f64>) -> Result<Self, SamplerError> {
        let c = MhConfig {
            chain_len,
            burn_in,
            proposal_scales,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.proposal_scales.is_empty() {
            return Err(SamplerError::Config("no proposal scales".into()));
        }
        if let Some(s) = self.proposal_scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(SamplerError::Config(format!("proposal scale {s} is not strictly positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhOutcome {
    pub state: Vec<f64>,
    pub log_target: f64,
    pub accepted: usize,
    pub steps: usize,
}

impl MhOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }
}

/// Symmetric Gaussian random-walk MH: `z' = z + scale ⊙ N(0, I)`, accepted
/// when `ln u < log_target(z') - log_target(z)`.
///
/// `visit(step, state)` sees every state after `burn_in` transitions.
pub fn mh_chain<F, V>(
    log_target: F,
    init: &[f64],
    config: &MhConfig,
    rng: &mut dyn RngCore,
    visit: V,
) -> Result<MhOutcome, SamplerError>
where
    F: FnMut(&[f64]) -> f64,
    V: FnMut(usize, &[f64]),
{
    config.validate()?;
    if config.proposal_scales.len() != init.len() {
        return Err(SamplerError::Config(format!(
            "{} proposal scales for a {}-dimensional state",
            config.proposal_scales.len(),
            init.len()
        )));
    }
    let scales = &config.proposal_scales;
    mh_chain_with_proposal(
        log_target,
        |cur: &[f64], out: &mut [f64], rng: &mut dyn RngCore| {
            for ((o, c), s) in out.iter_mut().zip(cur).zip(scales) {
                let eps: f64 = rng.sample(StandardNormal);
                *o = c + s * eps;
            }
        },
        init,
        config.chain_len,
        config.burn_in,
        rng,
        visit,
    )
}

/// MH with an arbitrary symmetric proposal. The proposal density is never
/// evaluated; the ratio is a pure log-target difference.
#[allow(clippy::too_many_arguments)]
pub fn mh_chain_with_proposal<F, P, V>(
    mut log_target: F,
    mut propose: P,
    init: &[f64],
    steps: usize,
    burn_in: usize,
    rng: &mut dyn RngCore,
    mut visit: V,
) -> Result<MhOutcome, SamplerError>
where
    F: FnMut(&[f64]) -> f64,
    P: FnMut(&[f64], &mut [f64], &mut dyn RngCore),
    V: FnMut(usize, &[f64]),
{
    let mut cur = init.to_vec();
    let mut cur_lp = log_target(&cur);
    if !cur_lp.is_finite() {
        return Err(SamplerError::NonFiniteInit(cur_lp));
    }
    let mut prop = vec![0.0; cur.len()];
    let mut accepted = 0;
    for step in 0..steps {
        propose(&cur, &mut prop, rng);
        // u is drawn every step so stream consumption does not depend on the target
        let u: f64 = rng.random();
        let prop_lp = log_target(&prop);
        if prop_lp.is_nan() {
            return Err(SamplerError::NanLogTarget { step });
        }
        let log_ratio = prop_lp - cur_lp;
        if u.ln() < log_ratio {
            std::mem::swap(&mut cur, &mut prop);
            cur_lp = prop_lp;
            accepted += 1;
        }
        if step >= burn_in {
            visit(step, &cur);
        }
    }
    Ok(MhOutcome {
        state: cur,
        log_target: cur_lp,
        accepted,
        steps,
    })
}
