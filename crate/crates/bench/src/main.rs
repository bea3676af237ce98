use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use ttsem::models::gmm::GmmRegularizer;
use ttsem::models::pk::CovarianceMode;
use ttsem::Variant;
use ttsem_bench::spec::{GmmTruth, PkTruth};
use ttsem_bench::{cmd_replicate, cmd_run, cmd_simulate, AlgoSpec, ExperimentSpec, GammaSpec, ModelKind, RhoSpec};

#[derive(Parser)]
#[command(name = "ttsem", version, about = "Two-timescale stochastic EM: simulate, fit and compare")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and print its SHA-256 content hash.
    Simulate(Flags),
    /// Fit one algorithm to a dataset and write its trajectory CSV.
    Run(Flags),
    /// Replicated comparison: writes metrics.csv and summary.json to --out.
    Replicate(Flags),
}

#[derive(Args, Default)]
struct Flags {
    /// gmm or pk.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Dataset file (run).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Algorithm name; a comma-separated list for replicate.
    #[arg(long)]
    algo: Option<String>,
    /// SA-step schedule, e.g. poly:0.5:warmup=1ep or const:1.
    #[arg(long)]
    gamma: Option<GammaSpec>,
    /// Inc-step size, a number in (0, 1] or "auto".
    #[arg(long)]
    rho: Option<RhoSpec>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// vrTTEM epoch length in iterations.
    #[arg(long)]
    epoch_len: Option<usize>,
    #[arg(long)]
    epochs: Option<f64>,
    /// Number of samples to simulate.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output file (simulate, run) or directory (replicate).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file whose fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Fields accepted in a `--config` file.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelKind>,
    data: Option<PathBuf>,
    algo: Option<String>,
    gamma: Option<GammaSpec>,
    rho: Option<RhoSpec>,
    mc_samples: Option<usize>,
    epoch_len: Option<usize>,
    epochs: Option<f64>,
    n: Option<usize>,
    replicates: Option<usize>,
    seed: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    algorithms: Option<Vec<AlgoSpec>>,
    resolution: Option<usize>,
    mh_steps: Option<usize>,
    covariance: Option<CovarianceMode>,
    gmm_truth: Option<GmmTruth>,
    pk_truth: Option<PkTruth>,
    gmm_regularizer: Option<GmmRegularizer>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

macro_rules! merge {
    ($flags:ident, $file:ident, $($field:ident),*) => {
        $( if $file.$field.is_some() { $flags.$field = $file.$field.take(); } )*
    };
}

/// Flags merged with the config file, plus the experiment-only fields.
fn load(mut flags: Flags) -> Result<(Flags, ConfigFile), Failure> {
    let mut file = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
            serde_json::from_str::<ConfigFile>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(usage)?
        }
        None => ConfigFile::default(),
    };
    merge!(flags, file, model, data, algo, gamma, rho, mc_samples, epoch_len, epochs, n, replicates, seed, jobs, out);
    Ok((flags, file))
}

fn algo_spec(name: &str, flags: &Flags) -> Result<AlgoSpec, Failure> {
    let algo: Variant = name.parse().map_err(usage)?;
    Ok(AlgoSpec {
        algo,
        gamma: flags.gamma.clone(),
        rho: flags.rho,
        mc_samples: flags.mc_samples,
        epoch_len: flags.epoch_len,
    })
}

fn experiment(flags: &Flags, file: ConfigFile, model: ModelKind) -> Result<ExperimentSpec, Failure> {
    let mut spec = ExperimentSpec::desk(model);
    if let Some(v) = flags.n {
        spec.n = v;
    }
    if let Some(v) = flags.replicates {
        spec.replicates = v;
    }
    if let Some(v) = flags.epochs {
        spec.epochs = v;
    }
    if let Some(v) = flags.seed {
        spec.seed = v;
    }
    if let Some(v) = flags.jobs {
        spec.jobs = v;
    }
    if let Some(list) = &flags.algo {
        spec.algorithms = list.split(',').map(|a| algo_spec(a.trim(), flags)).collect::<Result<_, _>>()?;
    } else if flags.gamma.is_some() || flags.rho.is_some() || flags.mc_samples.is_some() || flags.epoch_len.is_some() {
        for a in &mut spec.algorithms {
            *a = algo_spec(a.algo.name(), flags)?;
        }
    }
    if let Some(v) = file.algorithms {
        spec.algorithms = v;
    }
    if let Some(v) = file.resolution {
        spec.resolution = v;
    }
    if let Some(v) = file.mh_steps {
        spec.mh_steps = v;
    }
    if let Some(v) = file.covariance {
        spec.covariance = v;
    }
    if let Some(v) = file.gmm_truth {
        spec.gmm_truth = v;
    }
    if let Some(v) = file.pk_truth {
        spec.pk_truth = v;
    }
    if let Some(v) = file.gmm_regularizer {
        spec.gmm_regularizer = v;
    }
    spec.validate().map_err(usage)?;
    Ok(spec)
}

fn execute(command: Command) -> Result<(), Failure> {
    let (name, flags) = match command {
        Command::Simulate(f) => ("simulate", f),
        Command::Run(f) => ("run", f),
        Command::Replicate(f) => ("replicate", f),
    };
    let (flags, file) = load(flags)?;
    let model = flags.model.ok_or_else(|| usage(anyhow!("--model is required")))?;
    let spec = experiment(&flags, file, model)?;
    let opts = spec.model_options();
    match name {
        "simulate" => {
            let out = flags.out.as_deref().ok_or_else(|| usage(anyhow!("--out is required")))?;
            let hash = cmd_simulate(model, spec.n, spec.seed, &opts, out).map_err(runtime)?;
            println!("{hash}");
        }
        "run" => {
            let data = flags.data.as_deref().ok_or_else(|| usage(anyhow!("--data is required")))?;
            let name = flags.algo.as_deref().ok_or_else(|| usage(anyhow!("--algo is required")))?;
            let algo = algo_spec(name, &flags)?;
            algo.resolve(model, 1, spec.epochs, spec.seed).map_err(usage)?;
            let (csv, traj) = cmd_run(model, data, &algo, spec.epochs, spec.seed, &opts, flags.out.as_deref()).map_err(runtime)?;
            if flags.out.is_none() {
                print!("{csv}");
            }
            log::info!("{} finished at k = {}: {:?}", algo.algo, traj.terminal_k, traj.terminal_theta);
        }
        _ => {
            let out = flags.out.as_deref().ok_or_else(|| usage(anyhow!("--out is required")))?;
            let report = cmd_replicate(&spec, out).map_err(runtime)?;
            let primary = &report.primary_metric;
            for a in &spec.algorithms {
                let finals = report.finals(a.algo, primary);
                let s = ttsem_bench::metrics::summarize(&finals);
                println!("{:<7} final {primary}: median {:.3e}  mean {:.3e}", a.algo.name(), s.median, s.mean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
