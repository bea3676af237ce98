//! Penalized Gaussian mixture with unit-variance components.
//!
//! Statistic layout for `M` components (`k = 2M - 1`):
//!
//! | slots            | content                          |
//! |------------------|----------------------------------|
//! | `0 .. M-1`       | `1{z = m}` for `m < M`           |
//! | `M-1 .. 2M-2`    | `1{z = m} * y` for `m < M`       |
//! | `2M-2`           | `y`                              |
//!
//! The last component has no free slot; its indicator is `1 - sum(s1)`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{LatentModel, ModelError};
use crate::samplers::{categorical_sample, logsumexp};
use crate::stats::StatVec;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Mixing weights (`M - 1` free entries) and component means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub omega: Vec<f64>,
    pub mu: Vec<f64>,
}

impl GmmParams {
    pub fn new(omega: Vec<f64>, mu: Vec<f64>) -> Result<Self, ModelError> {
        let p = GmmParams { omega, mu };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from all `M` weights; the last one is dropped.
    pub fn from_full_weights(weights: &[f64], mu: Vec<f64>) -> Result<Self, ModelError> {
        if weights.len() != mu.len() || weights.is_empty() {
            return Err(ModelError::InvalidParams("weights and means differ in length".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidParams(format!("weights sum to {sum}")));
        }
        Self::new(weights[..weights.len() - 1].to_vec(), mu)
    }

    pub fn components(&self) -> usize {
        self.mu.len()
    }

    /// `omega_M = 1 - sum(omega)`.
    pub fn last_weight(&self) -> f64 {
        1.0 - self.omega.iter().sum::<f64>()
    }

    pub fn full_weights(&self) -> Vec<f64> {
        let mut w = self.omega.clone();
        w.push(self.last_weight());
        w
    }

    /// Closed simplex and finite means. Interior-ness is only required by the
    /// regularized M-step, not by evaluation.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.mu.is_empty() || self.omega.len() + 1 != self.mu.len() {
            return Err(ModelError::InvalidParams(format!(
                "{} free weights for {} components",
                self.omega.len(),
                self.mu.len()
            )));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(ModelError::InvalidParams("non-finite mean".into()));
        }
        if self.omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.last_weight() < -1e-12 {
            return Err(ModelError::InvalidParams(format!("weights {:?} outside the simplex", self.omega)));
        }
        Ok(())
    }
}

/// Ridge on the means (`delta`) and symmetric Dirichlet concentration (`epsilon`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmRegularizer {
    pub delta: f64,
    pub epsilon: f64,
}

impl GmmRegularizer {
    pub fn new(delta: f64, epsilon: f64) -> Result<Self, ModelError> {
        if !(delta > 0.0 && epsilon > 0.0 && delta.is_finite() && epsilon.is_finite()) {
            return Err(ModelError::InvalidParams(format!(
                "regularizer needs delta > 0 and epsilon > 0, got ({delta}, {epsilon})"
            )));
        }
        Ok(GmmRegularizer { delta, epsilon })
    }

    /// `R(theta) = delta/2 sum mu^2 - epsilon sum_{m<=M} log omega_m`.
    ///
    /// The Dirichlet term counts each weight once, which is the penalty the
    /// closed-form M-step maximizes against.
    pub fn penalty(&self, theta: &GmmParams) -> f64 {
        let ridge = 0.5 * self.delta * theta.mu.iter().map(|m| m * m).sum::<f64>();
        let dirichlet = if self.epsilon == 0.0 {
            0.0
        } else {
            -self.epsilon * theta.full_weights().iter().map(|w| w.ln()).sum::<f64>()
        };
        ridge + dirichlet
    }
}

impl Default for GmmRegularizer {
    fn default() -> Self {
        GmmRegularizer {
            delta: 1e-3,
            epsilon: 1e-3,
        }
    }
}

pub fn stat_dim(components: usize) -> usize {
    2 * components - 1
}

fn components_from_dim(k: usize) -> Result<usize, ModelError> {
    if k == 0 || k % 2 == 0 {
        return Err(ModelError::InvalidStatistics(format!("dimension {k} is not 2M - 1")));
    }
    Ok(k.div_ceil(2))
}

/// Posterior component probabilities of observation `y`: softmax over `m` of
/// `log omega_m - (y - mu_m)^2 / 2`.
pub fn gmm_posterior_weights(y: f64, theta: &GmmParams) -> Vec<f64> {
    let mut logits: Vec<f64> = theta
        .full_weights()
        .iter()
        .zip(&theta.mu)
        .map(|(w, m)| w.ln() - 0.5 * (y - m) * (y - m))
        .collect();
    let lse = logsumexp(&logits);
    for v in logits.iter_mut() {
        *v = (*v - lse).exp();
    }
    logits
}

/// `E[S(z, y) | y; theta]`.
pub fn gmm_exact_expectation(y: f64, theta: &GmmParams) -> StatVec {
    let w = gmm_posterior_weights(y, theta);
    let m = theta.components();
    let mut s = Vec::with_capacity(stat_dim(m));
    s.extend_from_slice(&w[..m - 1]);
    s.extend(w[..m - 1].iter().map(|p| p * y));
    s.push(y);
    StatVec::new(s)
}

/// Statistic of observation `y` with 0-based component label `z`.
pub fn gmm_suff_stat(y: f64, z: usize, components: usize) -> Result<StatVec, ModelError> {
    if z >= components {
        return Err(ModelError::InvalidLatent(format!("label {z} with {components} components")));
    }
    let mut s = vec![0.0; stat_dim(components)];
    if z + 1 < components {
        s[z] = 1.0;
        s[components - 1 + z] = y;
    }
    s[2 * components - 2] = y;
    Ok(StatVec::new(s))
}

/// Smallest weight coefficient kept when statistics fall outside the valid region.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Regularized M-step.
///
/// `omega_m = (s1_m + eps) / (1 + eps M)`, `mu_m = s2_m / (s1_m + delta)` and
/// `mu_M = (s3 - sum s2) / (1 - sum s1 + delta)`.
///
/// Variance-reduced proxies are unbiased but need not lie in the convex hull
/// of per-sample statistics, so `s1` can leave the simplex. The objective then
/// has no maximizer over the weights; we floor the weight coefficients at
/// [`WEIGHT_FLOOR`] and renormalize, and clamp the mean denominators at `delta`.
/// Inside the valid region the closed form is used unchanged.
pub fn gmm_m_step(s: &[f64], reg: &GmmRegularizer) -> Result<GmmParams, ModelError> {
    let m = components_from_dim(s.len())?;
    let (s1, rest) = s.split_at(m - 1);
    let (s2, s3) = rest.split_at(m - 1);
    let s3 = s3[0];
    let eps = reg.epsilon;
    let delta = reg.delta;
    let sum_s1: f64 = s1.iter().sum();
    let sum_s2: f64 = s2.iter().sum();
    let last_s1 = 1.0 - sum_s1;

    let inside = s1.iter().all(|a| *a >= 0.0) && last_s1 >= 0.0;
    let omega: Vec<f64> = if inside {
        let norm = 1.0 + eps * m as f64;
        s1.iter().map(|a| (a + eps) / norm).collect()
    } else {
        log::debug!("mixing statistics {s1:?} outside the simplex; clipping");
        let coef = |a: f64| (a + eps).max(WEIGHT_FLOOR);
        let total: f64 = s1.iter().map(|a| coef(*a)).sum::<f64>() + coef(last_s1);
        s1.iter().map(|a| coef(*a) / total).collect()
    };
    let mut mu: Vec<f64> = s1.iter().zip(s2).map(|(a, b)| b / (a.max(0.0) + delta)).collect();
    mu.push((s3 - sum_s2) / (last_s1.max(0.0) + delta));

    let theta = GmmParams { omega, mu };
    if theta.mu.iter().chain(&theta.omega).any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidStatistics(format!("non-finite M-step image from {s:?}")));
    }
    if theta.omega.iter().any(|w| *w < 0.0) || theta.last_weight() < 0.0 {
        return Err(ModelError::InvalidStatistics(format!("negative mixing weight from {s:?}")));
    }
    Ok(theta)
}

/// `-(1/n) sum_i log sum_m omega_m N(y_i; mu_m, 1) + R(theta)`.
pub fn gmm_penalized_nll(data: &[f64], theta: &GmmParams, reg: &GmmRegularizer) -> f64 {
    let log_w: Vec<f64> = theta.full_weights().iter().map(|w| w.ln()).collect();
    let mut buf = vec![0.0; theta.components()];
    let mut total = 0.0;
    for &y in data {
        for ((b, lw), m) in buf.iter_mut().zip(&log_w).zip(&theta.mu) {
            *b = lw - 0.5 * (y - m) * (y - m) - HALF_LN_2PI;
        }
        total += logsumexp(&buf);
    }
    let data_term = if data.is_empty() { 0.0 } else { -total / data.len() as f64 };
    data_term + reg.penalty(theta)
}

/// Draws `n` observations: label from the mixing weights, then `N(mu_z, 1)`.
pub fn gmm_simulate(n: usize, theta: &GmmParams, rng: &mut dyn RngCore) -> Result<Vec<f64>, ModelError> {
    theta.validate()?;
    let mut w = theta.full_weights();
    if let Some(last) = w.last_mut() {
        *last = last.max(0.0);
    }
    (0..n)
        .map(|_| {
            let z = categorical_sample(&w, rng).map_err(|e| ModelError::InvalidParams(e.to_string()))?;
            let eps: f64 = rng.sample(StandardNormal);
            Ok(theta.mu[z] + eps)
        })
        .collect()
}

/// Uniform weights and means at the `(m + 1/2) / M` empirical quantiles
/// (the 25% and 75% quantiles for two components).
pub fn gmm_initial_params(data: &[f64], components: usize) -> Result<GmmParams, ModelError> {
    if data.is_empty() || components == 0 {
        return Err(ModelError::InvalidData("empty dataset or zero components".into()));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mu = (0..components)
        .map(|m| quantile_sorted(&sorted, (m as f64 + 0.5) / components as f64))
        .collect();
    let w = 1.0 / components as f64;
    GmmParams::new(vec![w; components - 1], mu)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// A Gaussian mixture bound to a dataset.
#[derive(Debug, Clone)]
pub struct GmmModel {
    data: Vec<f64>,
    components: usize,
    reg: GmmRegularizer,
}

impl GmmModel {
    pub fn new(data: Vec<f64>, components: usize, reg: GmmRegularizer) -> Result<Self, ModelError> {
        if components == 0 {
            return Err(ModelError::InvalidParams("zero components".into()));
        }
        if let Some(y) = data.iter().find(|y| !y.is_finite()) {
            return Err(ModelError::InvalidData(format!("non-finite observation {y}")));
        }
        Ok(GmmModel { data, components, reg })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn regularizer(&self) -> &GmmRegularizer {
        &self.reg
    }

    /// Full-batch exact expectation `s_bar(theta)`.
    pub fn mean_expectation(&self, theta: &GmmParams) -> StatVec {
        let mut acc = StatVec::zeros(stat_dim(self.components));
        for &y in &self.data {
            acc.add_assign(&gmm_exact_expectation(y, theta));
        }
        acc.scale(1.0 / self.data.len() as f64);
        acc
    }

    /// Batch EM from `theta0` until the largest parameter movement drops to
    /// `tol` or `max_iters` is reached. Returns the fit and the iteration count.
    pub fn fit_em(&self, theta0: &GmmParams, tol: f64, max_iters: usize) -> Result<(GmmParams, usize), ModelError> {
        let mut theta = theta0.clone();
        for it in 1..=max_iters {
            let next = gmm_m_step(&self.mean_expectation(&theta), &self.reg)?;
            let moved = max_movement(&theta, &next);
            theta = next;
            if moved <= tol {
                return Ok((theta, it));
            }
        }
        Ok((theta, max_iters))
    }
}

/// Largest absolute change across weights and means.
pub fn max_movement(a: &GmmParams, b: &GmmParams) -> f64 {
    a.omega
        .iter()
        .zip(&b.omega)
        .chain(a.mu.iter().zip(&b.mu))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

impl LatentModel for GmmModel {
    type Params = GmmParams;
    type Latent = usize;

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn stat_dim(&self) -> usize {
        stat_dim(self.components)
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..self.components).map(|m| format!("omega{m}")).collect();
        names.extend((1..=self.components).map(|m| format!("mu{m}")));
        names
    }

    fn param_values(&self, theta: &GmmParams) -> Vec<f64> {
        theta.omega.iter().chain(&theta.mu).copied().collect()
    }

    fn initial_latent(&self, _i: usize, _theta: &GmmParams) -> usize {
        0
    }

    fn sample_posterior(
        &self,
        i: usize,
        theta: &GmmParams,
        draws: usize,
        chain: &mut usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<usize>, ModelError> {
        let w = gmm_posterior_weights(self.data[i], theta);
        if w.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFiniteDensity(format!("posterior weights {w:?}")));
        }
        let out = (0..draws)
            .map(|_| categorical_sample(&w, rng).map_err(|e| ModelError::NonFiniteDensity(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(&last) = out.last() {
            *chain = last;
        }
        Ok(out)
    }

    fn suff_stat(&self, i: usize, z: &usize) -> StatVec {
        gmm_suff_stat(self.data[i], *z, self.components).expect("label produced by the sampler")
    }

    fn exact_expectation(&self, i: usize, theta: &GmmParams) -> Option<StatVec> {
        Some(gmm_exact_expectation(self.data[i], theta))
    }

    fn m_step(&self, s: &StatVec) -> Result<GmmParams, ModelError> {
        gmm_m_step(s, &self.reg)
    }

    fn penalized_nll(&self, theta: &GmmParams) -> Option<f64> {
        Some(gmm_penalized_nll(&self.data, theta, &self.reg))
    }

    fn has_exact_expectation(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, SeedTree};
    use approx::assert_relative_eq;

    fn params(omega: &[f64], mu: &[f64]) -> GmmParams {
        GmmParams::new(omega.to_vec(), mu.to_vec()).unwrap()
    }

    const NO_REG: GmmRegularizer = GmmRegularizer { delta: 0.0, epsilon: 0.0 };

    #[test]
    fn posterior_weights_equal_means_returns_priors() {
        let t = params(&[0.2, 0.3], &[1.5, 1.5, 1.5]);
        let w = gmm_posterior_weights(-4.0, &t);
        assert_relative_eq!(w[0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.3, epsilon = 1e-15);
        assert_relative_eq!(w[2], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn posterior_weights_symmetric_case() {
        let w = gmm_posterior_weights(0.0, &params(&[0.5], &[0.5, -0.5]));
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn posterior_weights_hand_value() {
        // exponents 0 and -1/2
        let w = gmm_posterior_weights(0.0, &params(&[0.5], &[0.0, 1.0]));
        let expected = 1.0 / (1.0 + (-0.5f64).exp());
        assert_relative_eq!(w[0], expected, epsilon = 1e-15);
        assert_relative_eq!(w[0], 0.62246, epsilon = 1e-5);
    }

    #[test]
    fn posterior_weights_far_observation_is_stable() {
        let w = gmm_posterior_weights(60.0, &params(&[0.5], &[-50.0, 50.0]));
        assert!(w.iter().all(|p| p.is_finite()));
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(w[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_expectation_examples() {
        let s = gmm_exact_expectation(2.0, &params(&[0.3], &[1.0, 1.0]));
        assert_relative_eq!(s[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(s[1], 0.6, epsilon = 1e-15);
        assert_eq!(s[2], 2.0);
        let s = gmm_exact_expectation(0.0, &params(&[0.1, 0.4], &[3.0, -1.0, 0.2]));
        assert_eq!(&s[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn suff_stat_layouts() {
        // 0-based labels: label 1 of 2 is the last component
        assert_eq!(gmm_suff_stat(3.0, 1, 2).unwrap().as_slice(), &[0.0, 0.0, 3.0]);
        assert_eq!(gmm_suff_stat(3.0, 0, 2).unwrap().as_slice(), &[1.0, 3.0, 3.0]);
        assert_eq!(
            gmm_suff_stat(-1.0, 1, 3).unwrap().as_slice(),
            &[0.0, 1.0, 0.0, -1.0, -1.0]
        );
        assert!(gmm_suff_stat(1.0, 2, 2).is_err());
    }

    #[test]
    fn m_step_hand_values() {
        let t = gmm_m_step(&[0.4, 0.2, 0.1], &NO_REG).unwrap();
        assert_relative_eq!(t.omega[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(t.mu[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(t.mu[1], -1.0 / 6.0, epsilon = 1e-15);

        let reg = GmmRegularizer { delta: 0.0, epsilon: 0.1 };
        let t = gmm_m_step(&[0.4, 0.2, 0.1], &reg).unwrap();
        assert_relative_eq!(t.omega[0], 0.5 / 1.2, epsilon = 1e-15);

        let t = gmm_m_step(&[0.3, 0.0, 0.0], &GmmRegularizer { delta: 0.7, epsilon: 0.2 }).unwrap();
        assert_eq!(t.mu, vec![0.0, 0.0]);
    }

    #[test]
    fn m_step_rejects_invalid_region() {
        assert!(gmm_m_step(&[0.5, 0.0], &GmmRegularizer::default()).is_err());
        assert!(gmm_m_step(&[0.0, 1.0, 0.0], &NO_REG).is_err());
        assert!(gmm_m_step(&[f64::NAN, 0.0, 0.0], &NO_REG).is_err());
    }

    #[test]
    fn m_step_clips_weights_outside_the_simplex() {
        let reg = GmmRegularizer::default();
        for s1 in [1.5, -0.5, 1.004] {
            let t = gmm_m_step(&[s1, 0.3, 0.1], &reg).unwrap();
            t.validate().unwrap();
            assert!(t.omega[0] > 0.0 && t.last_weight() > 0.0);
        }
        let t = gmm_m_step(&[1.5, 0.3, 0.1], &reg).unwrap();
        assert!(t.omega[0] > 0.999);
        assert_relative_eq!(t.mu[0], 0.3 / (1.5 + 1e-3), max_relative = 1e-14);
        assert_relative_eq!(t.mu[1], (0.1 - 0.3) / 1e-3, max_relative = 1e-12);
    }

    #[test]
    fn m_step_hard_assignments_recover_class_moments() {
        // six points, hard labels: class 0 = {-2, -1, -3}, class 1 = {1, 2}, class 2 = {4}
        let data = [(-2.0, 0), (1.0, 1), (-1.0, 0), (4.0, 2), (2.0, 1), (-3.0, 0)];
        let stats: Vec<StatVec> = data.iter().map(|&(y, z)| gmm_suff_stat(y, z, 3).unwrap()).collect();
        let s = StatVec::mean_of(&stats).unwrap();
        let t = gmm_m_step(&s, &NO_REG).unwrap();
        assert_relative_eq!(t.omega[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(t.omega[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(t.mu[0], -2.0, epsilon = 1e-14);
        assert_relative_eq!(t.mu[1], 1.5, epsilon = 1e-14);
        assert_relative_eq!(t.mu[2], 4.0, epsilon = 1e-13);
    }

    #[test]
    fn nll_single_component_at_mean() {
        let reg = GmmRegularizer { delta: 0.3, epsilon: 0.01 };
        let t = params(&[], &[1.7]);
        let v = gmm_penalized_nll(&[1.7], &t, &reg);
        assert_relative_eq!(v, HALF_LN_2PI + 0.15 * 1.7 * 1.7, epsilon = 1e-14);
    }

    #[test]
    fn nll_permutation_invariant() {
        let reg = GmmRegularizer::default();
        let data = [0.3, -1.2, 2.2, 0.0, 5.0];
        let a = params(&[0.2, 0.3], &[-1.0, 0.5, 2.0]);
        let b = params(&[0.5, 0.3], &[2.0, 0.5, -1.0]);
        assert_relative_eq!(
            gmm_penalized_nll(&data, &a, &reg),
            gmm_penalized_nll(&data, &b, &reg),
            epsilon = 1e-13
        );
    }

    #[test]
    fn mean_expectation_matches_average_of_per_sample() {
        let data = vec![0.1, -0.7, 1.3, 2.4];
        let model = GmmModel::new(data.clone(), 2, GmmRegularizer::default()).unwrap();
        let t = params(&[0.4], &[-0.5, 0.8]);
        let per: Vec<StatVec> = data.iter().map(|&y| gmm_exact_expectation(y, &t)).collect();
        let direct = StatVec::mean_of(&per).unwrap();
        let batch = model.mean_expectation(&t);
        for (a, b) in direct.iter().zip(batch.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn simulate_examples() {
        let tree = SeedTree::new(11);
        let mut rng = tree.stream(Domain::Data, 0, 0);
        assert!(gmm_simulate(0, &params(&[0.5], &[0.5, -0.5]), &mut rng).unwrap().is_empty());

        let n = 100_000;
        let ys = gmm_simulate(n, &params(&[1.0], &[2.5, -7.0]), &mut rng).unwrap();
        let mean = ys.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.5).abs() <= 4.0 / (n as f64).sqrt());

        let ys = gmm_simulate(n, &params(&[0.5], &[0.5, -0.5]), &mut rng).unwrap();
        let mean = ys.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= 4.0 * 1.25f64.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn initial_params_use_quartiles() {
        let data: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let t = gmm_initial_params(&data, 2).unwrap();
        assert_eq!(t.mu, vec![25.0, 75.0]);
        assert_eq!(t.omega, vec![0.5]);
    }
}
