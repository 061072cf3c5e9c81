//! `nslk`: command-line drivers for simulation, fitting, cross-validation,
//! fine-grid prediction and map export.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nslk_core::ModelVariant;

use crate::render::{Colormap, NanStyle};

#[derive(Debug, Parser)]
#[command(name = "nslk", version, about = "Nonstationary lattice kriging pipeline")]
struct Cli {
    /// RunConfig JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate fields on the lattice nodes from parameter fields.
    Simulate(SimulateArgs),
    /// Generate a synthetic (G, P) training dataset.
    GenTrain(GenTrainArgs),
    /// Per-day ARX(1) regression on gridded days; writes the residual stack.
    FitMean(FitMeanArgs),
    /// Standardized moving-window ensemble around one day.
    Windows(WindowsArgs),
    /// Masked reconstruction experiment on gridded fields.
    Reconstruct(ReconstructArgs),
    /// Fit the model variants to one day of station data.
    FitDay(FitDayArgs),
    /// Point-data range refinement for one day.
    Refine(RefineArgs),
    /// k-fold cross-validation over station days.
    Cv(CvArgs),
    /// Fine-grid kriging mean and standard-error maps.
    Predict(PredictArgs),
    /// Conditional draws on the fine grid.
    Condsim(CondsimArgs),
    /// Render one stack channel to PNG with a JSON sidecar.
    Render(RenderArgs),
    /// Validate a RunConfig and print it with defaults filled in.
    ValidateConfig(ValidateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output GridStack.
    #[arg(long)]
    out: PathBuf,
    /// Parameter-field stack (`log_kappa2`, `rho`, `theta`).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Stationary κ² (used when no parameter stack is given).
    #[arg(long)]
    kappa2: Option<f64>,
    /// Number of replicates.
    #[arg(short = 'r', long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Standardize pixelwise across replicates.
    #[arg(long)]
    standardize: bool,
}

#[derive(Debug, Args)]
struct GenTrainArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(short = 'r', long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FitMeanArgs {
    /// Day GridStacks in date order (`value` plus covariate channels).
    #[arg(long, num_args = 1..)]
    days: Vec<PathBuf>,
    /// Residual GridStack.
    #[arg(long)]
    out: PathBuf,
    /// Per-day fit summaries (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WindowsArgs {
    /// Residual stack, one channel per day.
    #[arg(long)]
    residuals: Option<PathBuf>,
    /// Zero-based day index.
    #[arg(long)]
    day: usize,
    #[arg(long)]
    before: Option<usize>,
    #[arg(long)]
    after: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Gridded fields, one channel per day.
    #[arg(long)]
    fields: PathBuf,
    /// Parameter fields for the nonstationary variant.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Fraction of pixels observed.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct StationInput {
    /// Station CSV.
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Parameter-field stack for the nonstationary variants.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Land-mask stack for the adjusted variant.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitDayArgs {
    #[command(flatten)]
    input: StationInput,
    /// ISO date of the day to fit.
    #[arg(long)]
    day: String,
    /// Comma-separated variant subset.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<ModelVariant>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[command(flatten)]
    input: StationInput,
    #[arg(long)]
    day: String,
    #[arg(long)]
    kappa_point_max: Option<f64>,
    /// Adjusted parameter-field stack.
    #[arg(long)]
    params_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    input: StationInput,
    /// Comma-separated ISO dates; all kept days when omitted.
    #[arg(long, value_delimiter = ',')]
    days: Option<Vec<String>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<ModelVariant>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SeKind {
    None,
    Exact,
    Conditional,
}

#[derive(Debug, Args)]
struct FineArgs {
    #[command(flatten)]
    input: StationInput,
    #[arg(long)]
    day: String,
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Covariate stack for the mean model.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    fine: FineArgs,
    #[arg(long, value_enum, default_value = "conditional")]
    se: SeKind,
    /// Directory for `mean.png` and `se.png`.
    #[arg(long)]
    png_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CondsimArgs {
    #[command(flatten)]
    fine: FineArgs,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    channel: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "viridis")]
    colormap: Colormap,
    #[arg(long, value_enum, default_value = "transparent")]
    nan: NanStyle,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Write the normalized config here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
