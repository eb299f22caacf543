use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "histodyn", version, about = "Fit, simulate and diagnose stochastic dynamics of panel data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a CSV panel, fit the PCA state space and write the latent panel.
    Ingest(IngestArgs),
    /// Fit an SDE model to a latent panel.
    Fit(FitArgs),
    /// Simulate paths from a fitted model.
    Simulate(SimulateArgs),
    /// Irreversibility, surprisal and tail probabilities per transition.
    Diagnose(DiagnoseArgs),
    /// Impute states inside observation gaps.
    Impute(ImputeArgs),
    /// Autocorrelation checks of data, simulations and residuals.
    Validate(ValidateArgs),
}

/// Flags shared by every command.
#[derive(Clone, Debug, Args, Serialize)]
pub struct Shared {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulation time per source time unit.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Euler–Maruyama sub-steps per source time unit.
    #[arg(long)]
    pub nsub: Option<usize>,
    /// Worker thread cap.
    #[arg(long)]
    #[serde(skip)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long, default_value = "unit")]
    pub unit_col: String,
    #[arg(long, default_value = "time")]
    pub time_col: String,
    /// Value columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// Columns to log10-transform.
    #[arg(long, value_delimiter = ',')]
    pub log_columns: Vec<String>,
    /// Columns kept as standardized axes outside the PCA.
    #[arg(long, value_delimiter = ',')]
    pub passthrough: Vec<String>,
    /// Principal components to keep; defaults to all.
    #[arg(long)]
    pub components: Option<usize>,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Lbn,
    Npsde,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub panel: PathBuf,
    #[arg(long, value_enum)]
    pub estimator: Estimator,
    /// JSON estimator config; individual flags override its fields.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Monte Carlo paths per unit for the npSDE likelihood.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub inducing_per_dim: Option<usize>,
    /// Keep the npSDE observation noise at its initial value.
    #[arg(long)]
    pub fix_noise: bool,
    #[arg(long)]
    pub noise_variance: Option<f64>,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    /// Start every unit of this panel from its first state, on its own times.
    #[arg(long)]
    #[serde(skip)]
    pub panel: Option<PathBuf>,
    /// Start state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Simulation-time horizon when starting from --x0.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub paths: usize,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneStep,
    Composed,
    Kde,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub panel: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Composed)]
    pub method: Method,
    /// Sub-steps inside the transition density; defaults to the panel's n_sub.
    #[arg(long)]
    pub method_nsub: Option<usize>,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long)]
    pub skip_tail: bool,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ImputeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub panel: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[command(flatten)]
    pub shared: Shared,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub panel: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub max_lag: usize,
    #[command(flatten)]
    pub shared: Shared,
}

impl Command {
    pub fn shared(&self) -> &Shared {
        match self {
            Command::Ingest(a) => &a.shared,
            Command::Fit(a) => &a.shared,
            Command::Simulate(a) => &a.shared,
            Command::Diagnose(a) => &a.shared,
            Command::Impute(a) => &a.shared,
            Command::Validate(a) => &a.shared,
        }
    }
}
