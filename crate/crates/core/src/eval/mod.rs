//! Metrics, baselines, the synthetic generator and the experiment runner.

pub mod baselines;
pub mod experiment;
pub mod metrics;
pub mod synth;

pub use baselines::{majority_class, oracle_search, run_fixed_probe, BaselineKind, OracleRow};
pub use experiment::{run_experiment, EvalReport, ExperimentSpec, SampleFilter};
pub use metrics::{compute_metrics, Metrics};
pub use synth::{generate, SynthConfig};
