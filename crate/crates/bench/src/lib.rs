//! Benchmark harness for the two-timescale stochastic EM family: dataset
//! synthesis, single runs, replicated comparisons and their CSV/JSON output.

pub mod experiment;
pub mod io;
pub mod metrics;
pub mod spec;

pub use experiment::{cmd_replicate, cmd_run, cmd_simulate, run_experiment, Dataset, ExperimentReport, ModelOptions};
pub use metrics::metric_precision_gmm;
pub use spec::{AlgoSpec, ExperimentSpec, GammaSpec, ModelKind, RhoSpec};
