//! The two-timescale driver.
//!
//! Every variant runs the same loop: draw index(es), refresh the drawn
//! per-sample statistics, build the proxy `Ŝ`, then
//!
//! ```text
//! stt   <- stt + rho   (Ŝ   - stt)      Inc-step
//! s_hat <- s_hat + gamma (stt - s_hat)  SA-step
//! theta <- m_step(s_hat)
//! ```
//!
//! Batch variants use the full-batch mean as the proxy; iEM/iSAEM use the
//! per-sample table mean; vrTTEM corrects an epoch anchor SVRG-style; fiTTEM
//! corrects the SAGA table mean with a second, independently drawn index that
//! is the only one allowed to write the table.

use std::time::Instant;

use rand::{Rng, RngCore};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, Variant};
use crate::model::{LatentModel, ModelError};
use crate::rng::{Domain, SeedTree};
use crate::stats::{PerSampleStatTable, StatVec};

/// Upper bound on rows written per trajectory CSV.
pub const MAX_CSV_ROWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset is empty")]
    EmptyData,
    #[error("{0} needs a model with a closed-form E-step")]
    NoExactExpectation(Variant),
    #[error("posterior sampling failed for sample {i} at iteration {k}: {source}")]
    Sampling {
        i: usize,
        k: u64,
        #[source]
        source: ModelError,
    },
    #[error("M-step failed at iteration {k}: {source}")]
    MStep {
        k: u64,
        #[source]
        source: ModelError,
    },
    #[error("non-finite {what} at iteration {k}")]
    NonFinite { what: &'static str, k: u64 },
    #[error("termination draw: {0}")]
    Termination(String),
}

/// Monte Carlo estimate of `E[S(z_i, y_i) | y_i; theta]` from `draws` posterior samples.
pub fn mc_step<M: LatentModel>(
    model: &M,
    i: usize,
    theta: &M::Params,
    draws: usize,
    chain: &mut M::Latent,
    rng: &mut dyn RngCore,
) -> Result<StatVec, ModelError> {
    assert!(draws >= 1, "mc_step needs at least one draw");
    let zs = model.sample_posterior(i, theta, draws, chain, rng)?;
    let mut iter = zs.iter();
    let mut acc = model.suff_stat(i, iter.next().expect("at least one draw"));
    for z in iter {
        acc.add_assign(&model.suff_stat(i, z));
    }
    if draws > 1 {
        acc.scale(1.0 / draws as f64);
    }
    Ok(acc)
}

/// SA-step: `s_hat + gamma (stt - s_hat)`; exactly `stt` when `gamma == 1`.
pub fn sa_step(s_hat: &StatVec, stt: &StatVec, gamma: f64) -> StatVec {
    relax(s_hat, stt, gamma)
}

/// Inc-step: `stt + rho (proxy - stt)`; exactly `proxy` when `rho == 1`.
pub fn inc_step(stt: &StatVec, proxy: &StatVec, rho: f64) -> StatVec {
    relax(stt, proxy, rho)
}

fn relax(from: &StatVec, to: &StatVec, step: f64) -> StatVec {
    assert_eq!(from.dim(), to.dim(), "statistic dimension mismatch");
    if step == 1.0 {
        return to.clone();
    }
    StatVec::new(from.iter().zip(to.iter()).map(|(a, b)| a + step * (b - a)).collect())
}

/// iSAEM proxy: the table mean after replacing entry `i` with `s_new`, i.e.
/// `mean + (s_new - entry_i) / n`.
pub fn proxy_isaem(table: &mut PerSampleStatTable, i: usize, s_new: StatVec, iter: u64) -> StatVec {
    table.replace(i, s_new, iter);
    table.mean().clone()
}

/// vrTTEM proxy: `anchor_stt + (s_new - anchor_entry_i)`.
pub fn proxy_vr(anchor_stt: &StatVec, anchor_entry_i: &StatVec, s_new: &StatVec) -> StatVec {
    assert_eq!(anchor_stt.dim(), s_new.dim());
    assert_eq!(anchor_entry_i.dim(), s_new.dim());
    StatVec::new(
        anchor_stt
            .iter()
            .zip(s_new.iter().zip(anchor_entry_i.iter()))
            .map(|(a, (s, e))| a + (s - e))
            .collect(),
    )
}

/// fiTTEM proxy: `mean + (s_new_i - entry_i)` against the table as it stands,
/// then the `j` stream writes `s_new_j` into slot `j`.
pub fn proxy_fi(
    table: &mut PerSampleStatTable,
    i: usize,
    j: usize,
    s_new_i: &StatVec,
    s_new_j: StatVec,
    iter: u64,
) -> StatVec {
    let stored = table.entry(i);
    let proxy = StatVec::new(
        table
            .mean()
            .iter()
            .zip(s_new_i.iter().zip(stored.iter()))
            .map(|(m, (s, e))| m + (s - e))
            .collect(),
    );
    table.replace(j, s_new_j, iter);
    proxy
}

/// `‖a - b‖²`.
pub fn gap_delta_s(a: &StatVec, b: &StatVec) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Draws `K` with `P(K = k) = gammas[k] / sum(gammas)`.
pub fn draw_termination(gammas: &[f64], rng: &mut dyn RngCore) -> Result<usize, EngineError> {
    if gammas.is_empty() {
        return Err(EngineError::Termination("empty stepsize sequence".into()));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(EngineError::Termination(format!("stepsize {g} is not positive")));
    }
    let total: f64 = gammas.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (k, g) in gammas.iter().enumerate() {
        cum += g;
        if u < cum {
            return Ok(k);
        }
    }
    Ok(gammas.len() - 1)
}

/// SVRG-style anchor held by vrTTEM for the current epoch. `anchor_stt` is the
/// full-batch mean of `anchor_entries` at the epoch's first iterate.
#[derive(Debug, Clone)]
pub struct EpochAnchor {
    pub anchor_stt: StatVec,
    pub anchor_entries: Vec<StatVec>,
}

impl EpochAnchor {
    pub fn anchor_mean(&self) -> StatVec {
        StatVec::mean_of(&self.anchor_entries).expect("non-empty anchor")
    }
}

/// One recorded iterate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub k: u64,
    /// Cost-comparable epochs elapsed.
    pub epoch: f64,
    pub theta: Vec<f64>,
    /// `‖Ŝ - stt‖²` after the Inc-step.
    pub delta_s_sq: f64,
    pub nll: Option<f64>,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub variant: Variant,
    pub param_names: Vec<String>,
    /// `K_f + 1` records: the initial state and one per iteration.
    pub records: Vec<IterRecord>,
    pub terminal_k: u64,
    pub terminal_theta: Vec<f64>,
}

impl Trajectory {
    /// Records selected for CSV output (see [`row_selected`]).
    pub fn csv_records(&self, n: usize) -> impl Iterator<Item = &IterRecord> {
        let total = self.records.len().saturating_sub(1) as u64;
        let variant = self.variant;
        self.records
            .iter()
            .filter(move |r| row_selected(r.k, total, n, variant))
    }

    /// Bitwise comparison of the iterate sequence (k, theta, ΔS), ignoring
    /// epoch accounting and timing.
    pub fn same_iterates(&self, other: &Trajectory) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.k == b.k
                    && a.delta_s_sq.to_bits() == b.delta_s_sq.to_bits()
                    && a.theta.len() == b.theta.len()
                    && a.theta.iter().zip(&b.theta).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Epochs elapsed after `k` iterations. vrTTEM pays one extra pass per
/// anchor refresh.
pub fn epoch_at(k: u64, variant: Variant, n: usize, epoch_len: usize) -> f64 {
    let n = n.max(1) as f64;
    match variant {
        v if v.is_batch() => k as f64,
        Variant::VrTtem => k as f64 / n + k.div_ceil(epoch_len.max(1) as u64) as f64,
        _ => k as f64 / n,
    }
}

/// Whether iteration `k` of a `total`-iteration run is written to CSV.
///
/// Short runs keep every row. Long runs keep a regular stride, the last row,
/// and every epoch boundary, within [`MAX_CSV_ROWS`].
pub fn row_selected(k: u64, total: u64, n: usize, variant: Variant) -> bool {
    let rows = total + 1;
    if rows <= MAX_CSV_ROWS as u64 {
        return true;
    }
    if k == 0 || k == total {
        return true;
    }
    let half = (MAX_CSV_ROWS / 2) as u64;
    let stride = rows.div_ceil(half - 1);
    if k % stride == 0 {
        return true;
    }
    let n = n.max(1) as u64;
    variant.is_incremental() && total / n < half - 2 && k % n == 0
}

pub struct RunOutput<P> {
    pub trajectory: Trajectory,
    /// `θ̂` at the terminal iteration.
    pub theta: P,
    pub s_hat: StatVec,
}

/// Read-only view handed to observers after every iteration.
pub struct IterationView<'a, P> {
    pub k: u64,
    pub gamma: f64,
    pub rho: f64,
    pub i_k: Option<usize>,
    pub j_k: Option<usize>,
    pub s_hat_prev: &'a StatVec,
    pub s_hat: &'a StatVec,
    pub stt: &'a StatVec,
    pub proxy: &'a StatVec,
    pub table: Option<&'a PerSampleStatTable>,
    pub anchor: Option<&'a EpochAnchor>,
    pub theta: &'a P,
}

/// Runs `config` on `model` from `theta0`.
pub fn run<M: LatentModel>(model: &M, config: &RunConfig, theta0: &M::Params) -> Result<RunOutput<M::Params>, EngineError> {
    run_with_observer(model, config, theta0, |_| {})
}

struct Ctx<'m, M: LatentModel> {
    model: &'m M,
    config: &'m RunConfig,
    seeds: SeedTree,
    chains: Vec<M::Latent>,
}

impl<M: LatentModel> Ctx<'_, M> {
    /// Exact or Monte Carlo statistic for sample `i` at iteration `k`
    /// (`k = None` for the initial pass).
    fn estep(&mut self, i: usize, theta: &M::Params, k: Option<u64>) -> Result<StatVec, EngineError> {
        let kk = k.unwrap_or(0);
        let s = if self.config.exact_estep {
            self.model
                .exact_expectation(i, theta)
                .ok_or(EngineError::NoExactExpectation(self.config.variant))?
        } else {
            let mut rng = match k {
                Some(k) => self.seeds.stream(Domain::Posterior, i as u64, k),
                None => self.seeds.stream(Domain::PosteriorInit, i as u64, 0),
            };
            mc_step(self.model, i, theta, self.config.mc_samples, &mut self.chains[i], &mut rng)
                .map_err(|source| EngineError::Sampling { i, k: kk, source })?
        };
        if !s.is_finite() {
            return Err(EngineError::Sampling {
                i,
                k: kk,
                source: ModelError::NonFiniteDensity("non-finite statistic".into()),
            });
        }
        Ok(s)
    }

    fn full_pass(&mut self, theta: &M::Params, k: Option<u64>) -> Result<Vec<StatVec>, EngineError> {
        (0..self.model.n_samples()).map(|i| self.estep(i, theta, k)).collect()
    }
}

/// Like [`run`], calling `observer` after every iteration.
pub fn run_with_observer<M, F>(
    model: &M,
    config: &RunConfig,
    theta0: &M::Params,
    mut observer: F,
) -> Result<RunOutput<M::Params>, EngineError>
where
    M: LatentModel,
    F: FnMut(&IterationView<'_, M::Params>),
{
    config.validate()?;
    let n = model.n_samples();
    if n == 0 {
        return Err(EngineError::EmptyData);
    }
    if config.exact_estep && !model.has_exact_expectation() {
        return Err(EngineError::NoExactExpectation(config.variant));
    }
    let variant = config.variant;
    let total = config.total_iters;
    let start = Instant::now();
    let seeds = SeedTree::new(config.seed);
    let mut ctx = Ctx {
        model,
        config,
        seeds,
        chains: (0..n).map(|i| model.initial_latent(i, theta0)).collect(),
    };
    let m_step = |s: &StatVec, k: u64| model.m_step(s).map_err(|source| EngineError::MStep { k, source });
    let nll_at = |theta: &M::Params, k: u64| {
        if config.track_nll && row_selected(k, total, n, variant) {
            model.penalized_nll(theta)
        } else {
            None
        }
    };
    let record = |k: u64, theta: &M::Params, delta: f64| IterRecord {
        k,
        epoch: epoch_at(k, variant, n, config.epoch_len),
        theta: model.param_values(theta),
        delta_s_sq: delta,
        nll: nll_at(theta, k),
        wall_ns: start.elapsed().as_nanos() as u64,
    };

    // Initialization: s_hat = stt = S̃(0) from one pass under theta0.
    let initial = ctx.full_pass(theta0, None)?;
    let s0 = StatVec::mean_of(&initial).expect("n >= 1");
    let mut s_hat = s0.clone();
    let mut stt = s0;
    let mut table = variant.uses_table().then(|| PerSampleStatTable::new(initial));
    let mut anchor: Option<EpochAnchor> = None;
    let mut theta = m_step(&s_hat, 0)?;

    let mut records = Vec::with_capacity(total as usize + 1);
    records.push(record(0, &theta, 0.0));
    let mut thetas_for_termination: Vec<M::Params> = Vec::new();
    if config.randomized_termination {
        thetas_for_termination.reserve(total as usize + 1);
        thetas_for_termination.push(theta.clone());
    }

    let mut index_i = ctx.seeds.stream(Domain::IndexI, 0, 0);
    let mut index_j = ctx.seeds.stream(Domain::IndexJ, 0, 0);

    for k in 0..total {
        let gamma = config.gamma.eval(k);
        let rho = config.rho;
        let mut i_k = None;
        let mut j_k = None;

        let proxy = match variant {
            Variant::Em | Variant::Mcem | Variant::Saem => {
                let pass = ctx.full_pass(&theta, Some(k))?;
                StatVec::mean_of(&pass).expect("n >= 1")
            }
            Variant::IEm | Variant::ISaem => {
                let i = index_i.random_range(0..n);
                i_k = Some(i);
                let s_new = ctx.estep(i, &theta, Some(k))?;
                proxy_isaem(table.as_mut().expect("table variant"), i, s_new, k + 1)
            }
            Variant::FiTtem => {
                let i = index_i.random_range(0..n);
                let j = index_j.random_range(0..n);
                i_k = Some(i);
                j_k = Some(j);
                let s_i = ctx.estep(i, &theta, Some(k))?;
                let s_j = if j == i { s_i.clone() } else { ctx.estep(j, &theta, Some(k))? };
                proxy_fi(table.as_mut().expect("table variant"), i, j, &s_i, s_j, k + 1)
            }
            Variant::VrTtem => {
                if k % config.epoch_len as u64 == 0 {
                    let entries = ctx.full_pass(&theta, Some(k))?;
                    anchor = Some(EpochAnchor {
                        anchor_stt: StatVec::mean_of(&entries).expect("n >= 1"),
                        anchor_entries: entries,
                    });
                }
                let a = anchor.as_ref().expect("anchor refreshed at epoch start");
                let i = index_i.random_range(0..n);
                i_k = Some(i);
                let s_new = ctx.estep(i, &theta, Some(k))?;
                proxy_vr(&a.anchor_stt, &a.anchor_entries[i], &s_new)
            }
        };

        stt = inc_step(&stt, &proxy, rho);
        let s_prev = std::mem::replace(&mut s_hat, StatVec::zeros(0));
        s_hat = sa_step(&s_prev, &stt, gamma);
        if !stt.is_finite() {
            return Err(EngineError::NonFinite { what: "stt", k });
        }
        if !s_hat.is_finite() {
            return Err(EngineError::NonFinite { what: "s_hat", k });
        }
        theta = m_step(&s_hat, k + 1)?;
        let delta = gap_delta_s(&proxy, &stt);

        observer(&IterationView {
            k,
            gamma,
            rho,
            i_k,
            j_k,
            s_hat_prev: &s_prev,
            s_hat: &s_hat,
            stt: &stt,
            proxy: &proxy,
            table: table.as_ref(),
            anchor: anchor.as_ref(),
            theta: &theta,
        });

        records.push(record(k + 1, &theta, delta));
        if config.randomized_termination {
            thetas_for_termination.push(theta.clone());
        }
    }

    let (terminal_k, theta_out) = if config.randomized_termination {
        let gammas: Vec<f64> = (0..total).map(|k| config.gamma.eval(k)).collect();
        let mut rng = ctx.seeds.stream(Domain::Termination, 0, 0);
        let kk = draw_termination(&gammas, &mut rng)?;
        (kk as u64, thetas_for_termination.swap_remove(kk))
    } else {
        (total, theta)
    };
    let terminal_theta = records[terminal_k as usize].theta.clone();
    Ok(RunOutput {
        trajectory: Trajectory {
            variant,
            param_names: model.param_names(),
            records,
            terminal_k,
            terminal_theta,
        },
        theta: theta_out,
        s_hat,
    })
}
