//! The three harness commands: simulate a dataset, run one algorithm on a
//! dataset, and run a replicated comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use ttsem::models::gmm::{gmm_initial_params, gmm_penalized_nll, gmm_simulate, GmmModel, GmmParams, GmmRegularizer};
use ttsem::models::pk::{pk_initial_params, pk_simulate, CovarianceMode, PkDesign, PkIndividual, PkModel, PkSamplerSettings, PK_COORD_NAMES};
use ttsem::{run, Domain, LatentModel, SeedTree, Trajectory, Variant};

use crate::io::{content_hash, fmt_f64, gmm_from_text, gmm_to_text, pk_from_csv, pk_to_csv, trajectory_csv, write_file};
use crate::metrics::{epoch_grid, grid_indices, metric_precision_gmm, summarize, MetricSeries, Summary};
use crate::spec::{AlgoSpec, ExperimentSpec, GmmTruth, ModelKind, PkTruth};

/// Truths and model settings shared by all commands.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOptions {
    pub gmm_truth: GmmTruth,
    pub pk_truth: PkTruth,
    pub gmm_regularizer: GmmRegularizer,
    pub pk_sampler: PkSamplerSettings,
    pub covariance: CovarianceMode,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            gmm_truth: GmmTruth::default(),
            pk_truth: PkTruth::default(),
            gmm_regularizer: GmmRegularizer::default(),
            pk_sampler: PkSamplerSettings::default(),
            covariance: CovarianceMode::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            gmm_truth: self.gmm_truth.clone(),
            pk_truth: self.pk_truth.clone(),
            gmm_regularizer: self.gmm_regularizer,
            pk_sampler: self.pk_sampler(),
            covariance: self.covariance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Gmm(Vec<f64>),
    Pk(Vec<PkIndividual>),
}

impl Dataset {
    /// Draws `n` samples from the configured truth; the seed fixes every byte.
    pub fn simulate(model: ModelKind, n: usize, seed: u64, opts: &ModelOptions) -> Result<Dataset> {
        let mut rng = SeedTree::new(seed).stream(Domain::Data, 0, 0);
        Ok(match model {
            ModelKind::Gmm => Dataset::Gmm(gmm_simulate(n, &opts.gmm_truth.params()?, &mut rng)?),
            ModelKind::Pk => Dataset::Pk(pk_simulate(n, &opts.pk_truth.params()?, &PkDesign::default(), &mut rng)?),
        })
    }

    pub fn parse(model: ModelKind, text: &str) -> Result<Dataset> {
        let data = match model {
            ModelKind::Gmm => Dataset::Gmm(gmm_from_text(text)?),
            ModelKind::Pk => Dataset::Pk(pk_from_csv(text)?),
        };
        if data.len() == 0 {
            bail!("dataset is empty");
        }
        Ok(data)
    }

    pub fn to_text(&self) -> String {
        match self {
            Dataset::Gmm(d) => gmm_to_text(d),
            Dataset::Pk(c) => pk_to_csv(c),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Gmm(d) => d.len(),
            Dataset::Pk(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Dataset::Gmm(_) => ModelKind::Gmm,
            Dataset::Pk(_) => ModelKind::Pk,
        }
    }
}

/// Writes a simulated dataset and returns its SHA-256 content hash.
pub fn cmd_simulate(model: ModelKind, n: usize, seed: u64, opts: &ModelOptions, out: &Path) -> Result<String> {
    let text = Dataset::simulate(model, n, seed, opts)?.to_text();
    write_file(out, &text)?;
    Ok(content_hash(text.as_bytes()))
}

/// Result of fitting one algorithm to one dataset.
pub struct Fit {
    pub trajectory: Trajectory,
    pub theta0: Vec<f64>,
}

/// Runs `algo` from the data-driven starting point. `track_nll` evaluates
/// the penalized NLL on CSV rows when the model has one.
pub fn fit(data: &Dataset, algo: &AlgoSpec, epochs: f64, seed: u64, opts: &ModelOptions, track_nll: bool) -> Result<Fit> {
    let mut config = algo.resolve(data.kind(), data.len(), epochs, seed)?;
    config.track_nll = track_nll;
    match data {
        Dataset::Gmm(d) => {
            let m = opts.gmm_truth.means.len();
            let theta0 = gmm_initial_params(d, m)?;
            let model = GmmModel::new(d.clone(), m, opts.gmm_regularizer)?;
            let out = run(&model, &config, &theta0)?;
            Ok(Fit {
                theta0: model.param_values(&theta0),
                trajectory: out.trajectory,
            })
        }
        Dataset::Pk(c) => {
            let theta0 = pk_initial_params(c)?;
            let model = PkModel::new(c.clone(), opts.covariance, opts.pk_sampler)?;
            let out = run(&model, &config, &theta0)?;
            Ok(Fit {
                theta0: model.param_values(&theta0),
                trajectory: out.trajectory,
            })
        }
    }
}

/// Fits `algo` to the dataset at `data_path` and writes the trajectory CSV to
/// `out` (or returns it only, when `out` is `None`).
pub fn cmd_run(
    model: ModelKind,
    data_path: &Path,
    algo: &AlgoSpec,
    epochs: f64,
    seed: u64,
    opts: &ModelOptions,
    out: Option<&Path>,
) -> Result<(String, Trajectory)> {
    // reject configuration problems before reading or fitting anything
    algo.resolve(model, 1, epochs, seed)?;
    let text = crate::io::read_file(data_path)?;
    let data = Dataset::parse(model, &text).with_context(|| format!("parsing {}", data_path.display()))?;
    info!("dataset {} ({} samples, sha256 {})", data_path.display(), data.len(), content_hash(text.as_bytes()));
    let fit = fit(&data, algo, epochs, seed, opts, true)?;
    let csv = trajectory_csv(&fit.trajectory, data.len());
    if let Some(path) = out {
        write_file(path, &csv)?;
    }
    Ok((csv, fit.trajectory))
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgoResult {
    pub algo: Variant,
    pub series: Vec<MetricSeries>,
    pub final_theta: Vec<f64>,
}

impl AlgoResult {
    pub fn metric(&self, name: &str) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.metric == name)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub seed: u64,
    pub data_hash: String,
    pub theta0: Vec<f64>,
    /// GMM: batch-EM limit on this dataset. PK: the simulation truth.
    pub reference: Vec<f64>,
    pub algorithms: Vec<AlgoResult>,
}

impl ReplicateResult {
    pub fn algo(&self, v: Variant) -> Option<&AlgoResult> {
        self.algorithms.iter().find(|a| a.algo == v)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub grid: Vec<f64>,
    pub primary_metric: String,
    pub replicates: Vec<ReplicateResult>,
}

/// Metric ranked in summaries: GMM mean precision, PK squared error on ka.
pub fn primary_metric(model: ModelKind) -> &'static str {
    match model {
        ModelKind::Gmm => "precision",
        ModelKind::Pk => "sq_err_ka",
    }
}

/// GMM batch EM "to double precision": parameter movement below 1e-14.
pub const REFERENCE_TOL: f64 = 1e-14;
pub const REFERENCE_MAX_ITERS: usize = 50_000;

fn gmm_from_values(values: &[f64], m: usize) -> GmmParams {
    GmmParams {
        omega: values[..m - 1].to_vec(),
        mu: values[m - 1..2 * m - 1].to_vec(),
    }
}

fn replicate(spec: &ExperimentSpec, index: usize, opts: &ModelOptions) -> Result<ReplicateResult> {
    let tree = SeedTree::new(spec.seed).child(Domain::Replicate, index as u64);
    let data_seed = tree.root();
    // common random numbers across algorithms within a replicate
    let run_seed = tree.child(Domain::Posterior, 0).root();
    let data = Dataset::simulate(spec.model, spec.n, data_seed, opts)?;
    let data_hash = content_hash(data.to_text().as_bytes());
    info!("replicate {index}: data seed {data_seed}, sha256 {data_hash}");

    let grid = epoch_grid(spec.epochs, spec.resolution);
    let reference = match &data {
        Dataset::Gmm(d) => {
            let m = opts.gmm_truth.means.len();
            let model = GmmModel::new(d.clone(), m, opts.gmm_regularizer)?;
            let (fit, iters) = model.fit_em(&gmm_initial_params(d, m)?, REFERENCE_TOL, REFERENCE_MAX_ITERS)?;
            if iters == REFERENCE_MAX_ITERS {
                log::warn!("replicate {index}: reference EM hit the iteration cap");
            }
            model.param_values(&fit)
        }
        Dataset::Pk(_) => opts.pk_truth.params()?.pop().to_vec(),
    };

    let mut theta0 = Vec::new();
    let mut algorithms = Vec::with_capacity(spec.algorithms.len());
    for algo in &spec.algorithms {
        // NLL is evaluated on the metric grid below, not on every CSV row
        let f = fit(&data, algo, spec.epochs, run_seed, opts, false)?;
        if theta0.is_empty() {
            theta0 = f.theta0.clone();
        } else if theta0 != f.theta0 {
            bail!("replicate {index}: algorithms started from different points");
        }
        let records = &f.trajectory.records;
        let idx = grid_indices(records, &grid);
        let at = |metric: &str, g: &dyn Fn(&[f64], f64) -> f64| MetricSeries {
            metric: metric.to_string(),
            values: idx.iter().map(|&i| g(&records[i].theta, records[i].delta_s_sq)).collect(),
        };
        let mut series = Vec::new();
        match &data {
            Dataset::Gmm(d) => {
                let m = opts.gmm_truth.means.len();
                let mu_star = reference[m - 1..].to_vec();
                series.push(at("precision", &|th, _| metric_precision_gmm(&th[m - 1..], &mu_star)));
                series.push(at("nll", &|th, _| gmm_penalized_nll(d, &gmm_from_values(th, m), &opts.gmm_regularizer)));
            }
            Dataset::Pk(_) => {
                for (c, name) in PK_COORD_NAMES.iter().enumerate() {
                    let star = reference[c];
                    series.push(at(&format!("sq_err_{name}"), &|th, _| (th[c] - star).powi(2)));
                }
            }
        }
        series.push(at("delta_s_sq", &|_, ds| ds));
        let final_theta = records[*idx.last().unwrap()].theta.clone();
        algorithms.push(AlgoResult {
            algo: algo.algo,
            series,
            final_theta,
        });
    }
    Ok(ReplicateResult {
        index,
        seed: data_seed,
        data_hash,
        theta0,
        reference,
        algorithms,
    })
}

/// Runs every replicate (in parallel up to `spec.jobs`) and collects the
/// results in replicate order. Any failing replicate aborts the experiment.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let opts = spec.model_options();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(spec.jobs).build()?;
    let replicates = pool.install(|| {
        (0..spec.replicates)
            .into_par_iter()
            .map(|r| replicate(spec, r, &opts).with_context(|| format!("replicate {r}")))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ExperimentReport {
        spec: spec.clone(),
        grid: epoch_grid(spec.epochs, spec.resolution),
        primary_metric: primary_metric(spec.model).to_string(),
        replicates,
    })
}

impl ExperimentReport {
    fn metric_names(&self) -> Vec<String> {
        self.replicates[0].algorithms[0].series.iter().map(|s| s.metric.clone()).collect()
    }

    /// Per-replicate final values of `metric` for `algo`.
    pub fn finals(&self, algo: Variant, metric: &str) -> Vec<f64> {
        self.replicates
            .iter()
            .map(|r| r.algo(algo).and_then(|a| a.metric(metric)).map(MetricSeries::last).unwrap_or(f64::NAN))
            .collect()
    }

    /// `algorithm,epoch,metric,mean,median,q25,q75`.
    pub fn aggregated_csv(&self) -> String {
        let mut out = String::from("algorithm,epoch,metric,mean,median,q25,q75\n");
        for (a, algo) in self.spec.algorithms.iter().enumerate() {
            for metric in self.metric_names() {
                for (g, epoch) in self.grid.iter().enumerate() {
                    let values: Vec<f64> = self
                        .replicates
                        .iter()
                        .map(|r| r.algorithms[a].metric(&metric).expect("metric present").values[g])
                        .collect();
                    let s = summarize(&values);
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        algo.algo,
                        fmt_f64(*epoch),
                        metric,
                        fmt_f64(s.mean),
                        fmt_f64(s.median),
                        fmt_f64(s.q25),
                        fmt_f64(s.q75)
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    /// Final-epoch summaries, pairwise win counts on the primary metric and
    /// per-replicate values.
    pub fn summary_json(&self) -> serde_json::Value {
        let mut finals: BTreeMap<String, BTreeMap<String, Summary>> = BTreeMap::new();
        for a in &self.spec.algorithms {
            let entry = finals.entry(a.algo.to_string()).or_default();
            for metric in self.metric_names() {
                entry.insert(metric.clone(), summarize(&self.finals(a.algo, &metric)));
            }
        }
        let mut wins: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for a in &self.spec.algorithms {
            let fa = self.finals(a.algo, &self.primary_metric);
            for b in &self.spec.algorithms {
                if a.algo == b.algo {
                    continue;
                }
                let fb = self.finals(b.algo, &self.primary_metric);
                let count = fa.iter().zip(&fb).filter(|(x, y)| x < y).count();
                wins.entry(a.algo.to_string()).or_default().insert(b.algo.to_string(), count);
            }
        }
        let replicates: Vec<serde_json::Value> = self
            .replicates
            .iter()
            .map(|r| {
                let finals: BTreeMap<String, BTreeMap<String, f64>> = r
                    .algorithms
                    .iter()
                    .map(|a| (a.algo.to_string(), a.series.iter().map(|s| (s.metric.clone(), s.last())).collect()))
                    .collect();
                serde_json::json!({
                    "index": r.index,
                    "seed": r.seed,
                    "data_hash": r.data_hash,
                    "theta0": r.theta0,
                    "reference": r.reference,
                    "final": finals,
                })
            })
            .collect();
        serde_json::json!({
            "spec": self.spec,
            "primary_metric": self.primary_metric,
            "final_epoch": self.grid.last(),
            "final": finals,
            "pairwise_wins": wins,
            "replicates": replicates,
        })
    }
}

/// Runs the experiment and writes `metrics.csv` and `summary.json` under `out_dir`.
pub fn cmd_replicate(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentReport> {
    let report = run_experiment(spec)?;
    write_file(&out_dir.join("metrics.csv"), &report.aggregated_csv())?;
    let json = serde_json::to_string_pretty(&report.summary_json())?;
    write_file(&out_dir.join("summary.json"), &(json + "\n"))?;
    Ok(report)
}
