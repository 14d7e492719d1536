//! `autoprobe` command line.
//!
//! Reports go to stdout, or atomically to `--out` (whose path is then
//! printed). Diagnostics go to stderr. Exit status: 0 success, 2 bad
//! input or configuration, 3 runtime failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "autoprobe", version)]
#[command(about = "Train and evaluate correctness probes over code-LLM hidden states")]
pub struct Cli {
    /// Seed for every stochastic choice of this invocation
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Worker threads for oracle labeling and experiment grids
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,

    /// Output path, written atomically; stdout when omitted
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Allow replacing existing labels and rewriting the input dataset
    #[arg(long, global = true)]
    pub overwrite: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
pub enum Command {
    /// Inspect or check an APRB1 dataset
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Attach oracle labels to a dataset
    Label(LabelArgs),
    /// Train a probe; writes an APRM1 model to --out
    Train(TrainArgs),
    /// Score a trained probe on the test split
    Eval(EvalArgs),
    /// Per-sample predictions of a trained probe
    Predict(PredictArgs),
    /// Fixed probes on every (layer, boundary position)
    OracleSearch(SpecArgs),
    /// Train and score every configuration of the ablation grid
    Ablate(SpecArgs),
    /// Train on stratified fractions of the training split
    Sweep(SweepArgs),
    /// Full experiment: probe, baselines, optional sweep and ablation
    Experiment(SpecArgs),
    /// Generate a planted-signal dataset; writes APRB1 to --out
    Synth(SynthArgs),
}

#[derive(Subcommand)]
pub enum DatasetAction {
    /// Shape, layers and label coverage
    Info { path: PathBuf },
    /// Full check of manifest invariants and every payload block
    Validate { path: PathBuf },
}

#[derive(Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// JSON map of sample id to source text, or a directory of `<id>.<ext>` files
    #[arg(long)]
    pub units: PathBuf,
    #[arg(long)]
    pub oracle_config: PathBuf,
    #[arg(long)]
    pub kind: String,
    /// Labeling report destination; stdout when omitted
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Experiment spec (JSON); its train filter, model and training settings are used
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Training report destination
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Experiment spec (JSON); its test filter and label kind are used
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated sample ids; every sample when omitted
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
}

#[derive(Args)]
pub struct SpecArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Experiment spec (JSON); defaults apply when omitted
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: SpecArgs,
    /// Comma-separated training fractions in (0, 1]
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1.0")]
    pub fractions: Vec<f64>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Layers x positions per layer; positions must be 4
    #[arg(long, default_value = "8x4")]
    pub cells: String,
    /// Signal cell as `layer,position`, or `none`
    #[arg(long, default_value = "3,last_code")]
    pub signal: String,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Class mean distance from the cell mean, in noise standard deviations
    #[arg(long, default_value_t = 2.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value = "functionality")]
    pub kind: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
