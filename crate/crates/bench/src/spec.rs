//! Experiment descriptions and the textual stepsize / rho syntax used by the CLI.

use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use ttsem::models::gmm::{GmmParams, GmmRegularizer};
use ttsem::models::pk::{CovarianceMode, PkParams, PkSamplerSettings, PK_DIM};
use ttsem::{RunConfig, StepSchedule, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gmm,
    Pk,
}

impl FromStr for ModelKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gmm" => Ok(ModelKind::Gmm),
            "pk" => Ok(ModelKind::Pk),
            other => bail!("unknown model {other:?} (expected gmm or pk)"),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Gmm => "gmm",
            ModelKind::Pk => "pk",
        })
    }
}

/// Warmup length, either in iterations or in epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Warmup {
    Iters(u64),
    Epochs(f64),
}

/// Unresolved stepsize schedule; epochs are converted once `n` and the
/// variant are known.
///
/// Syntax: `one`, `const:V`, `poly:A`, with optional `:warmup=N`, `:warmup=Kep`
/// and `:scale=C` suffixes on `poly`.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaSpec {
    Constant(f64),
    Poly { exponent: f64, scale: f64, warmup: Option<Warmup> },
}

impl FromStr for GammaSpec {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default().to_ascii_lowercase();
        let num = |v: &str| v.parse::<f64>().with_context(|| format!("bad number {v:?} in gamma {s:?}"));
        match kind.as_str() {
            "one" => {
                if parts.next().is_some() {
                    bail!("gamma 'one' takes no arguments");
                }
                Ok(GammaSpec::Constant(1.0))
            }
            "const" => {
                let v = num(parts.next().ok_or_else(|| anyhow!("const needs a value"))?)?;
                if parts.next().is_some() {
                    bail!("gamma const takes one argument");
                }
                Ok(GammaSpec::Constant(v))
            }
            "poly" => {
                let exponent = num(parts.next().ok_or_else(|| anyhow!("poly needs an exponent"))?)?;
                let mut scale = 1.0;
                let mut warmup = None;
                for opt in parts {
                    let (key, value) = opt.split_once('=').ok_or_else(|| anyhow!("bad gamma option {opt:?}"))?;
                    match key {
                        "scale" => scale = num(value)?,
                        "warmup" => {
                            warmup = Some(match value.strip_suffix("ep") {
                                Some(e) => Warmup::Epochs(num(e)?),
                                None => Warmup::Iters(value.parse().with_context(|| format!("bad warmup {value:?}"))?),
                            })
                        }
                        _ => bail!("unknown gamma option {key:?}"),
                    }
                }
                Ok(GammaSpec::Poly { exponent, scale, warmup })
            }
            _ => bail!("unknown gamma schedule {s:?} (expected one, const:V or poly:A[:warmup=..][:scale=..])"),
        }
    }
}

impl fmt::Display for GammaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaSpec::Constant(v) => write!(f, "const:{v:?}"),
            GammaSpec::Poly { exponent, scale, warmup } => {
                write!(f, "poly:{exponent:?}")?;
                if *scale != 1.0 {
                    write!(f, ":scale={scale:?}")?;
                }
                match warmup {
                    Some(Warmup::Iters(w)) => write!(f, ":warmup={w}"),
                    Some(Warmup::Epochs(e)) => write!(f, ":warmup={e:?}ep"),
                    None => Ok(()),
                }
            }
        }
    }
}

impl GammaSpec {
    pub fn resolve(&self, variant: Variant, n: usize) -> Result<StepSchedule> {
        let schedule = match *self {
            GammaSpec::Constant(v) => StepSchedule::constant(v)?,
            GammaSpec::Poly { exponent, scale, warmup } => {
                let iters_per_epoch = if variant.is_batch() { 1.0 } else { n as f64 };
                let w = match warmup {
                    None => 0,
                    Some(Warmup::Iters(w)) => w,
                    Some(Warmup::Epochs(e)) => (e * iters_per_epoch).ceil() as u64,
                };
                if w == 0 {
                    StepSchedule::polynomial(scale, exponent)?
                } else {
                    StepSchedule::warmup_polynomial(scale, exponent, w)?
                }
            }
        };
        Ok(schedule)
    }
}

impl Serialize for GammaSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GammaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `auto` picks the variant's default (`n^(-2/3)` for vrTTEM/fiTTEM, else 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoSpec {
    Auto,
    Value(f64),
}

impl FromStr for RhoSpec {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("auto") {
            return Ok(RhoSpec::Auto);
        }
        let v: f64 = s.trim().parse().with_context(|| format!("rho must be a number or 'auto', got {s:?}"))?;
        Ok(RhoSpec::Value(v))
    }
}

impl Serialize for RhoSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RhoSpec::Auto => s.serialize_str("auto"),
            RhoSpec::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for RhoSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(RhoSpec::Value(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One algorithm in an experiment, with optional overrides of its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSpec {
    pub algo: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GammaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<RhoSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_len: Option<usize>,
}

impl AlgoSpec {
    pub fn plain(algo: Variant) -> Self {
        AlgoSpec {
            algo,
            gamma: None,
            rho: None,
            mc_samples: None,
            epoch_len: None,
        }
    }

    /// Full run configuration for a dataset of `n` samples.
    pub fn resolve(&self, model: ModelKind, n: usize, epochs: f64, seed: u64) -> Result<RunConfig> {
        let mut c = RunConfig::defaults(self.algo, n, epochs);
        c.seed = seed;
        if model == ModelKind::Pk {
            // one retained MH draw per E-step
            c.mc_samples = 1;
        }
        if let Some(g) = &self.gamma {
            c.gamma = g.resolve(self.algo, n)?;
        }
        if let Some(RhoSpec::Value(r)) = self.rho {
            c.rho = r;
        }
        if let Some(m) = self.mc_samples {
            c.mc_samples = m;
        }
        if let Some(m) = self.epoch_len {
            c.epoch_len = m;
        }
        if c.exact_estep && model == ModelKind::Pk {
            bail!("{} needs a closed-form E-step, which the PK model does not have", self.algo);
        }
        c.validate().with_context(|| format!("configuration for {}", self.algo))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmTruth {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
}

impl Default for GmmTruth {
    fn default() -> Self {
        GmmTruth {
            weights: vec![0.5, 0.5],
            means: vec![0.5, -0.5],
        }
    }
}

impl GmmTruth {
    pub fn params(&self) -> Result<GmmParams> {
        Ok(GmmParams::from_full_weights(&self.weights, self.means.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkTruth {
    /// `(T_lag, ka, V, k)` population values.
    pub pop: [f64; PK_DIM],
    pub omega_sd: [f64; PK_DIM],
    pub sigma2: f64,
}

impl Default for PkTruth {
    fn default() -> Self {
        PkTruth {
            pop: [1.0, 1.0, 8.0, 0.1],
            omega_sd: [0.4, 0.5, 0.2, 0.3],
            sigma2: 0.5,
        }
    }
}

impl PkTruth {
    pub fn params(&self) -> Result<PkParams> {
        Ok(PkParams::from_sds(self.pop, self.omega_sd, self.sigma2)?)
    }
}

/// A replicated comparison of several algorithms on simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelKind,
    pub n: usize,
    pub replicates: usize,
    pub epochs: f64,
    pub seed: u64,
    pub algorithms: Vec<AlgoSpec>,
    /// Metric grid points per epoch.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// MH transitions per PK E-step.
    #[serde(default = "default_mh_steps")]
    pub mh_steps: usize,
    #[serde(default)]
    pub covariance: CovarianceMode,
    #[serde(default)]
    pub gmm_truth: GmmTruth,
    #[serde(default)]
    pub pk_truth: PkTruth,
    #[serde(default)]
    pub gmm_regularizer: GmmRegularizer,
}

fn default_resolution() -> usize {
    10
}

fn default_jobs() -> usize {
    1
}

fn default_mh_steps() -> usize {
    50
}

impl ExperimentSpec {
    /// Desk-scale defaults: GMM n = 10^4 over 7 epochs, PK n = 500 over 5
    /// epochs, 10 replicates each.
    pub fn desk(model: ModelKind) -> Self {
        let (n, epochs, algos) = match model {
            ModelKind::Gmm => (
                10_000,
                7.0,
                vec![Variant::Em, Variant::IEm, Variant::Saem, Variant::ISaem, Variant::VrTtem, Variant::FiTtem],
            ),
            ModelKind::Pk => (500, 5.0, vec![Variant::Saem, Variant::ISaem, Variant::VrTtem, Variant::FiTtem]),
        };
        ExperimentSpec {
            model,
            n,
            replicates: 10,
            epochs,
            seed: 0,
            algorithms: algos.into_iter().map(AlgoSpec::plain).collect(),
            resolution: default_resolution(),
            jobs: default_jobs(),
            mh_steps: default_mh_steps(),
            covariance: CovarianceMode::default(),
            gmm_truth: GmmTruth::default(),
            pk_truth: PkTruth::default(),
            gmm_regularizer: GmmRegularizer::default(),
        }
    }

    pub fn pk_sampler(&self) -> PkSamplerSettings {
        PkSamplerSettings {
            chain_len: self.mh_steps,
            burn_in: self.mh_steps / 2,
            ..PkSamplerSettings::default()
        }
    }

    /// Number of metric grid points: `ceil(epochs) * resolution`.
    pub fn grid_len(&self) -> usize {
        self.epochs.ceil() as usize * self.resolution
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            bail!("n must be positive");
        }
        if self.replicates == 0 {
            bail!("replicates must be positive");
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            bail!("epochs must be positive");
        }
        if self.algorithms.is_empty() {
            bail!("no algorithms to run");
        }
        if self.resolution == 0 || self.jobs == 0 || self.mh_steps == 0 {
            bail!("resolution, jobs and mh_steps must be positive");
        }
        let mut names: Vec<_> = self.algorithms.iter().map(|a| a.algo).collect();
        names.sort();
        names.dedup();
        if names.len() != self.algorithms.len() {
            bail!("each algorithm may appear once");
        }
        match self.model {
            ModelKind::Gmm => {
                self.gmm_truth.params()?;
            }
            ModelKind::Pk => {
                self.pk_truth.params()?;
            }
        }
        for a in &self.algorithms {
            a.resolve(self.model, self.n, self.epochs, 0)?;
        }
        Ok(())
    }
}
