//! One-compartment oral-absorption PK model with an absorption lag time.
//!
//! Individual parameters `z = (T_lag, ka, V, k)` are log-normal around the
//! population values; sampling happens in log space. Observations are
//! `y_ij = f(t_ij, z_i) + N(0, sigma^2)`.
//!
//! Statistic layout (`k = 15`):
//!
//! | slots     | content                                              |
//! |-----------|------------------------------------------------------|
//! | `0..4`    | `log z`                                              |
//! | `4..14`   | upper triangle of `log z log zᵀ`, row-major          |
//! | `14`      | per-observation mean squared residual                |

use log::debug;
use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{LatentModel, ModelError};
use crate::samplers::{mh_chain, MhConfig};
use crate::stats::StatVec;

pub const PK_DIM: usize = 4;
pub const PK_STAT_DIM: usize = 15;
pub const PK_COORD_NAMES: [&str; PK_DIM] = ["tlag", "ka", "v", "k"];

/// Branch switch for the `ka == k` removable singularity, relative to `max(ka, k)`.
pub const KA_K_REL_THRESHOLD: f64 = 1e-8;
pub const OMEGA_EIGEN_FLOOR: f64 = 1e-8;
pub const SIGMA2_FLOOR: f64 = 1e-10;

const UPPER: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (3, 3),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    /// Independent random effects; off-diagonal moments are discarded.
    #[default]
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkParams {
    /// `(log T_lag, log ka, log V, log k)` population values.
    pub log_pop: [f64; PK_DIM],
    /// Covariance of the log individual parameters.
    pub omega2: [[f64; PK_DIM]; PK_DIM],
    pub sigma2: f64,
}

impl PkParams {
    pub fn new(log_pop: [f64; PK_DIM], omega2: [[f64; PK_DIM]; PK_DIM], sigma2: f64) -> Result<Self, ModelError> {
        let p = PkParams { log_pop, omega2, sigma2 };
        p.validate()?;
        Ok(p)
    }

    /// Diagonal covariance built from standard deviations.
    pub fn from_sds(pop: [f64; PK_DIM], omega_sd: [f64; PK_DIM], sigma2: f64) -> Result<Self, ModelError> {
        let mut omega2 = [[0.0; PK_DIM]; PK_DIM];
        for d in 0..PK_DIM {
            omega2[d][d] = omega_sd[d] * omega_sd[d];
        }
        PkParams::new(pop.map(f64::ln), omega2, sigma2)
    }

    /// `T_lag = 1, ka = 1, V = 8, k = 0.1`, `omega = (0.4, 0.5, 0.2, 0.3)`, `sigma^2 = 0.5`.
    pub fn reference_truth() -> Self {
        PkParams::from_sds([1.0, 1.0, 8.0, 0.1], [0.4, 0.5, 0.2, 0.3], 0.5).expect("valid constants")
    }

    /// Population values on the natural scale.
    pub fn pop(&self) -> [f64; PK_DIM] {
        self.log_pop.map(f64::exp)
    }

    pub fn omega_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.omega2[r][c])
    }

    /// Finite, symmetric and positive semi-definite, `sigma^2 >= 0`.
    ///
    /// Degenerate (zero) variances are allowed so that noise-free cohorts can
    /// be simulated; the posterior requires a positive definite covariance.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.log_pop.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParams("non-finite population value".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(ModelError::InvalidParams(format!("sigma2 = {}", self.sigma2)));
        }
        let m = self.omega_matrix();
        if m.iter().any(|v| !v.is_finite()) || (m - m.transpose()).abs().max() > 1e-12 {
            return Err(ModelError::InvalidParams("omega2 is not a finite symmetric matrix".into()));
        }
        let min_eig = SymmetricEigen::new(m).eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(ModelError::InvalidParams(format!("omega2 has eigenvalue {min_eig}")));
        }
        Ok(())
    }

    pub fn precision(&self) -> Result<Matrix4<f64>, ModelError> {
        let chol = self
            .omega_matrix()
            .cholesky()
            .ok_or_else(|| ModelError::InvalidParams("omega2 is not positive definite".into()))?;
        Ok(chol.inverse())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkIndividual {
    pub dose: f64,
    pub times: Vec<f64>,
    pub obs: Vec<f64>,
}

impl PkIndividual {
    pub fn new(dose: f64, times: Vec<f64>, obs: Vec<f64>) -> Result<Self, ModelError> {
        let ind = PkIndividual { dose, times, obs };
        ind.validate()?;
        Ok(ind)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.dose > 0.0 && self.dose.is_finite()) {
            return Err(ModelError::InvalidData(format!("dose {}", self.dose)));
        }
        if self.times.is_empty() || self.times.len() != self.obs.len() {
            return Err(ModelError::InvalidData("need J >= 1 matching times and observations".into()));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ModelError::InvalidData("times must be strictly increasing".into()));
        }
        if self.times.iter().chain(&self.obs).any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidData("non-finite time or observation".into()));
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

/// Dose and sampling times shared by every simulated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkDesign {
    pub dose: f64,
    pub times: Vec<f64>,
}

impl Default for PkDesign {
    fn default() -> Self {
        PkDesign {
            dose: 100.0,
            times: vec![0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 16.0, 20.0, 24.0],
        }
    }
}

/// Regular branch, written with `expm1` so it stays accurate as `ka -> k`.
pub fn pk_structural_general(dt: f64, ka: f64, v: f64, k: f64, dose: f64) -> f64 {
    if dt <= 0.0 {
        return 0.0;
    }
    let lo = ka.min(k);
    let diff = (ka - k).abs();
    dose * ka / (v * diff) * (-lo * dt).exp() * -(-diff * dt).exp_m1()
}

/// `ka == k` limit: `D ka dt exp(-k dt) / V`.
pub fn pk_structural_limit(dt: f64, ka: f64, v: f64, k: f64, dose: f64) -> f64 {
    if dt <= 0.0 {
        return 0.0;
    }
    dose * ka * dt * (-k * dt).exp() / v
}

#[inline]
fn concentration(t: f64, z: &[f64; PK_DIM], dose: f64) -> f64 {
    let [tlag, ka, v, k] = *z;
    let dt = t - tlag;
    if dt <= 0.0 {
        0.0
    } else if (ka - k).abs() < KA_K_REL_THRESHOLD * ka.max(k) {
        pk_structural_limit(dt, ka, v, k, dose)
    } else {
        pk_structural_general(dt, ka, v, k, dose)
    }
}

/// Concentration at time `t` for individual parameters `z = (T_lag, ka, V, k)`.
///
/// `D ka / (V (ka - k)) (exp(-k dt) - exp(-ka dt))` with `dt = t - T_lag`, zero
/// before the lag time.
pub fn pk_structural(t: f64, z: &[f64; PK_DIM], dose: f64) -> Result<f64, ModelError> {
    if z.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(ModelError::InvalidLatent(format!("non-positive PK parameters {z:?}")));
    }
    if !t.is_finite() {
        return Err(ModelError::InvalidLatent(format!("time {t}")));
    }
    Ok(concentration(t, z, dose))
}

/// Sum of squared residuals, or `None` if `exp(z_log)` leaves the positive reals.
fn residual_ss(indiv: &PkIndividual, z_log: &[f64; PK_DIM]) -> Option<f64> {
    let z = z_log.map(f64::exp);
    if z.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return None;
    }
    let mut ss = 0.0;
    for (t, y) in indiv.times.iter().zip(&indiv.obs) {
        let r = y - concentration(*t, &z, indiv.dose);
        ss += r * r;
    }
    ss.is_finite().then_some(ss)
}

/// Unnormalized log posterior of one individual's log-parameters, with the
/// precision matrix already factored out of `theta`.
#[derive(Debug, Clone)]
pub struct PkPosterior<'a> {
    indiv: &'a PkIndividual,
    log_pop: Vector4<f64>,
    precision: Matrix4<f64>,
    sigma2: f64,
}

impl<'a> PkPosterior<'a> {
    pub fn new(indiv: &'a PkIndividual, theta: &PkParams) -> Result<Self, ModelError> {
        if !(theta.sigma2 > 0.0) {
            return Err(ModelError::InvalidParams("posterior needs sigma2 > 0".into()));
        }
        Ok(PkPosterior {
            indiv,
            log_pop: Vector4::from(theta.log_pop),
            precision: theta.precision()?,
            sigma2: theta.sigma2,
        })
    }

    /// `-SS / (2 sigma^2) - (u - mu)ᵀ Ω⁻¹ (u - mu) / 2`; `-inf` for unusable `u`.
    pub fn log_density(&self, z_log: &[f64; PK_DIM]) -> f64 {
        let Some(ss) = residual_ss(self.indiv, z_log) else {
            return f64::NEG_INFINITY;
        };
        let d = Vector4::from(*z_log) - self.log_pop;
        let quad = d.dot(&(self.precision * d));
        let lp = -ss / (2.0 * self.sigma2) - 0.5 * quad;
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }
}

/// See [`PkPosterior::log_density`].
pub fn pk_log_posterior(indiv: &PkIndividual, z_log: &[f64; PK_DIM], theta: &PkParams) -> Result<f64, ModelError> {
    Ok(PkPosterior::new(indiv, theta)?.log_density(z_log))
}

pub fn pk_suff_stat(indiv: &PkIndividual, z_log: &[f64; PK_DIM]) -> StatVec {
    let mut s = Vec::with_capacity(PK_STAT_DIM);
    s.extend_from_slice(z_log);
    s.extend(UPPER.iter().map(|&(r, c)| z_log[r] * z_log[c]));
    let ss = residual_ss(indiv, z_log).unwrap_or(f64::INFINITY);
    s.push(ss / indiv.n_obs() as f64);
    StatVec::new(s)
}

/// Rebuilds the symmetric matrix stored in the upper-triangle slots.
pub fn upper_to_matrix(upper: &[f64]) -> Matrix4<f64> {
    assert_eq!(upper.len(), UPPER.len());
    let mut m = Matrix4::zeros();
    for (&(r, c), v) in UPPER.iter().zip(upper) {
        m[(r, c)] = *v;
        m[(c, r)] = *v;
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct PkMStep {
    pub params: PkParams,
    /// The covariance needed eigenvalue flooring.
    pub omega_floored: bool,
    pub sigma2_floored: bool,
}

/// `log_pop = s1`, `Ω = mat(s2) - s1 s1ᵀ` (floored at eigenvalue 1e-8),
/// `sigma^2 = max(s3, 1e-10)`.
pub fn pk_m_step(s: &[f64], mode: CovarianceMode) -> Result<PkMStep, ModelError> {
    if s.len() != PK_STAT_DIM {
        return Err(ModelError::InvalidStatistics(format!("expected {PK_STAT_DIM} statistics, got {}", s.len())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidStatistics(format!("non-finite statistics {s:?}")));
    }
    let mean = Vector4::new(s[0], s[1], s[2], s[3]);
    let mut omega = upper_to_matrix(&s[4..14]) - mean * mean.transpose();
    if mode == CovarianceMode::Diagonal {
        omega = Matrix4::from_diagonal(&omega.diagonal());
    }
    let eig = SymmetricEigen::new(omega);
    let omega_floored = eig.eigenvalues.min() < OMEGA_EIGEN_FLOOR;
    if omega_floored {
        debug!("flooring omega2 eigenvalues {:?}", eig.eigenvalues.as_slice());
        let vals = eig.eigenvalues.map(|v| v.max(OMEGA_EIGEN_FLOOR));
        omega = &eig.eigenvectors * Matrix4::from_diagonal(&vals) * eig.eigenvectors.transpose();
        omega = (omega + omega.transpose()) * 0.5;
    }
    let sigma2_floored = s[14] < SIGMA2_FLOOR;
    if sigma2_floored {
        debug!("flooring sigma2 {}", s[14]);
    }
    let mut omega2 = [[0.0; PK_DIM]; PK_DIM];
    for (r, row) in omega2.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = omega[(r, c)];
        }
    }
    Ok(PkMStep {
        params: PkParams {
            log_pop: [s[0], s[1], s[2], s[3]],
            omega2,
            sigma2: s[14].max(SIGMA2_FLOOR),
        },
        omega_floored,
        sigma2_floored,
    })
}

/// Symmetric square root of a PSD matrix, via Cholesky when it exists.
fn psd_factor(m: &Matrix4<f64>) -> Matrix4<f64> {
    if let Some(ch) = m.cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(*m);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Matrix4::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Simulates `n` patients under `design`.
pub fn pk_simulate(
    n: usize,
    theta: &PkParams,
    design: &PkDesign,
    rng: &mut dyn RngCore,
) -> Result<Vec<PkIndividual>, ModelError> {
    Ok(pk_simulate_with_latents(n, theta, design, rng)?.into_iter().map(|(p, _)| p).collect())
}

/// [`pk_simulate`], also returning each patient's drawn log-parameters.
pub fn pk_simulate_with_latents(
    n: usize,
    theta: &PkParams,
    design: &PkDesign,
    rng: &mut dyn RngCore,
) -> Result<Vec<(PkIndividual, [f64; PK_DIM])>, ModelError> {
    theta.validate()?;
    let factor = psd_factor(&theta.omega_matrix());
    let mu = Vector4::from(theta.log_pop);
    let sd = theta.sigma2.sqrt();
    let mut cohort = Vec::with_capacity(n);
    for _ in 0..n {
        let u = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let log_z = mu + factor * u;
        let z = [log_z[0].exp(), log_z[1].exp(), log_z[2].exp(), log_z[3].exp()];
        let obs = design
            .times
            .iter()
            .map(|&t| {
                let eps: f64 = rng.sample(StandardNormal);
                concentration(t, &z, design.dose) + sd * eps
            })
            .collect();
        let log_z = [log_z[0], log_z[1], log_z[2], log_z[3]];
        cohort.push((PkIndividual::new(design.dose, design.times.clone(), obs)?, log_z));
    }
    Ok(cohort)
}

/// Rough per-patient estimates `(T_lag, ka, V, k)` from the raw profile, or
/// `None` when the profile is too flat or noisy to read.
pub fn naive_individual_estimate(ind: &PkIndividual) -> Option<[f64; PK_DIM]> {
    let (jmax, cmax) = ind
        .obs
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if !(cmax > 0.0) {
        return None;
    }
    let tmax = ind.times[jmax];

    // log-linear fit on the last three positive points after the peak
    let tail: Vec<(f64, f64)> = ind.times[jmax + 1..]
        .iter()
        .zip(&ind.obs[jmax + 1..])
        .filter(|(_, y)| **y > 0.0)
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    let tail = &tail[tail.len().saturating_sub(3)..];
    if tail.len() < 2 {
        return None;
    }
    let m = tail.len() as f64;
    let tbar = tail.iter().map(|p| p.0).sum::<f64>() / m;
    let lbar = tail.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = tail.iter().map(|p| (p.0 - tbar).powi(2)).sum();
    let sxy: f64 = tail.iter().map(|p| (p.0 - tbar) * (p.1 - lbar)).sum();
    let k = -sxy / sxx;
    if !(k > 0.0 && k.is_finite()) {
        return None;
    }

    let first = ind.obs.iter().position(|y| *y > 0.1 * cmax)?;
    let tlag = if first == 0 {
        0.5 * ind.times[0]
    } else {
        0.5 * (ind.times[first - 1] + ind.times[first])
    }
    .max(1e-3);

    let intercept = lbar - (-k) * tbar;
    let c0 = (intercept - k * tlag).exp();
    let v = ind.dose / c0;

    // tmax - tlag = ln(ka / k) / (ka - k), decreasing in ka on (k, inf)
    let target = tmax - tlag;
    let g = |ka: f64| (ka / k).ln() / (ka - k);
    let ka = if !(target > 0.0) || target >= 1.0 / k {
        2.0 * k
    } else {
        let (mut lo, mut hi) = (k * (1.0 + 1e-6), 1e3_f64.max(10.0 * k));
        if g(hi) > target {
            hi
        } else {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    };
    let est = [tlag, ka, v, k];
    est.iter().all(|x| *x > 0.0 && x.is_finite()).then_some(est)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Starting point: median of the naive per-patient log-estimates, each
/// population value inflated by 20%, `omega2 = 0.1 I`, `sigma^2 = 1`.
pub fn pk_initial_params(cohort: &[PkIndividual]) -> Result<PkParams, ModelError> {
    let estimates: Vec<[f64; PK_DIM]> = cohort.iter().filter_map(naive_individual_estimate).collect();
    if estimates.is_empty() {
        return Err(ModelError::InvalidData("no patient profile supports a naive estimate".into()));
    }
    let mut log_pop = [0.0; PK_DIM];
    for (d, lp) in log_pop.iter_mut().enumerate() {
        let mut col: Vec<f64> = estimates.iter().map(|e| e[d].ln()).collect();
        *lp = median(&mut col) + 1.2f64.ln();
    }
    let mut omega2 = [[0.0; PK_DIM]; PK_DIM];
    for (d, row) in omega2.iter_mut().enumerate() {
        row[d] = 0.1;
    }
    PkParams::new(log_pop, omega2, 1.0)
}

/// Metropolis–Hastings settings for the per-patient E-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkSamplerSettings {
    /// MH transitions per retained draw.
    pub chain_len: usize,
    pub burn_in: usize,
    /// Proposal sd as a multiple of the current `sqrt(omega2_dd)`.
    pub scale_factor: f64,
}

impl Default for PkSamplerSettings {
    fn default() -> Self {
        PkSamplerSettings {
            chain_len: 50,
            burn_in: 25,
            scale_factor: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PkModel {
    cohort: Vec<PkIndividual>,
    mode: CovarianceMode,
    sampler: PkSamplerSettings,
}

impl PkModel {
    pub fn new(cohort: Vec<PkIndividual>, mode: CovarianceMode, sampler: PkSamplerSettings) -> Result<Self, ModelError> {
        for ind in &cohort {
            ind.validate()?;
        }
        if sampler.chain_len == 0 || !(sampler.scale_factor > 0.0) {
            return Err(ModelError::InvalidParams("MH needs chain_len >= 1 and a positive scale".into()));
        }
        Ok(PkModel { cohort, mode, sampler })
    }

    pub fn cohort(&self) -> &[PkIndividual] {
        &self.cohort
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn sampler(&self) -> &PkSamplerSettings {
        &self.sampler
    }

    fn mh_config(&self, theta: &PkParams) -> Result<MhConfig, ModelError> {
        let scales = (0..PK_DIM)
            .map(|d| self.sampler.scale_factor * theta.omega2[d][d].max(OMEGA_EIGEN_FLOOR).sqrt())
            .collect();
        MhConfig::new(self.sampler.chain_len, self.sampler.burn_in, scales)
            .map_err(|e| ModelError::InvalidParams(e.to_string()))
    }
}

impl LatentModel for PkModel {
    type Params = PkParams;
    type Latent = [f64; PK_DIM];

    fn n_samples(&self) -> usize {
        self.cohort.len()
    }

    fn stat_dim(&self) -> usize {
        PK_STAT_DIM
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = PK_COORD_NAMES.iter().map(|c| format!("{c}_pop")).collect();
        names.extend(UPPER.iter().map(|&(r, c)| {
            if r == c {
                format!("omega2_{}", PK_COORD_NAMES[r])
            } else {
                format!("omega2_{}_{}", PK_COORD_NAMES[r], PK_COORD_NAMES[c])
            }
        }));
        names.push("sigma2".into());
        names
    }

    fn param_values(&self, theta: &PkParams) -> Vec<f64> {
        let mut v: Vec<f64> = theta.pop().to_vec();
        v.extend(UPPER.iter().map(|&(r, c)| theta.omega2[r][c]));
        v.push(theta.sigma2);
        v
    }

    fn initial_latent(&self, _i: usize, theta: &PkParams) -> [f64; PK_DIM] {
        theta.log_pop
    }

    fn sample_posterior(
        &self,
        i: usize,
        theta: &PkParams,
        draws: usize,
        chain: &mut [f64; PK_DIM],
        rng: &mut dyn RngCore,
    ) -> Result<Vec<[f64; PK_DIM]>, ModelError> {
        let post = PkPosterior::new(&self.cohort[i], theta)?;
        let cfg = self.mh_config(theta)?;
        let target = |z: &[f64]| post.log_density(&[z[0], z[1], z[2], z[3]]);
        // a chain carried over from a much wider posterior can sit at -inf
        if !target(chain).is_finite() {
            *chain = theta.log_pop;
        }
        let mut out = Vec::with_capacity(draws);
        for _ in 0..draws {
            let res = mh_chain(target, chain, &cfg, rng, |_, _| {})
                .map_err(|e| ModelError::NonFiniteDensity(format!("patient {i}: {e}")))?;
            *chain = [res.state[0], res.state[1], res.state[2], res.state[3]];
            out.push(*chain);
        }
        Ok(out)
    }

    fn suff_stat(&self, i: usize, z: &[f64; PK_DIM]) -> StatVec {
        pk_suff_stat(&self.cohort[i], z)
    }

    fn m_step(&self, s: &StatVec) -> Result<PkParams, ModelError> {
        Ok(pk_m_step(s, self.mode)?.params)
    }
}
