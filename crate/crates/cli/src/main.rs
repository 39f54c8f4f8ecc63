use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::{EvalSubset, Method};

/// Intention-aware trajectory prediction experiments on a synthetic
/// roundabout.
#[derive(Debug, Parser)]
#[command(name = "ipred", version)]
pub struct Cli {
    /// Root seed for data generation, initialization and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for data, checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON file overriding model, training and data defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic episodes and split them into train and test.
    GenData(GenDataArgs),
    /// Train one method on the generated training split.
    Train(TrainArgs),
    /// Track intentions over one case and sample futures at every step.
    Predict(PredictArgs),
    /// Score trained methods on the test split.
    Eval(EvalArgs),
    /// Decode a grid over the 2-D latent space for one test window.
    LatentGrid(LatentGridArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    cases: usize,
    /// Share of cases used for training.
    #[arg(long)]
    split: Option<f64>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// One of proposed, cvae-noI, mlp-ensemble, mc-dropout.
    #[arg(long)]
    method: Method,
    /// KL weight of the CVAE objective.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long, default_value = "proposed")]
    method: Method,
    /// Case id from the dataset manifest; defaults to the first test case.
    #[arg(long)]
    case: Option<String>,
    /// Futures sampled per step.
    #[arg(long, default_value_t = 10)]
    samples: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Comma-separated methods; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Which test windows to score.
    #[arg(long, default_value = "all")]
    subset: EvalSubset,
}

#[derive(Debug, Args)]
struct LatentGridArgs {
    #[arg(long, default_value = "proposed")]
    method: Method,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    min: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    max: f64,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Case id of the decoded window; defaults to the first bimodal test
    /// window.
    #[arg(long)]
    case: Option<String>,
    /// Fixed intention branch; defaults to the tracker's most likely exit
    /// for car B.
    #[arg(long)]
    branch: Option<u8>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IP_LOG", "info")).init();
    let cli = Cli::parse();
    let result = (|| {
        let ctx = commands::Context::new(cli.seed, cli.out.clone(), cli.config.as_deref())?;
        match &cli.command {
            Command::GenData(a) => commands::gen_data(&ctx, a.cases, a.split, a.force),
            Command::Train(a) => commands::train(&ctx, a.method, a.beta, a.epochs),
            Command::Predict(a) => commands::predict(&ctx, a.method, a.case.as_deref(), a.samples),
            Command::Eval(a) => commands::eval(&ctx, &a.methods, a.samples, a.subset),
            Command::LatentGrid(a) => {
                commands::latent_grid(&ctx, a.method, a.min, a.max, a.steps, a.case.as_deref(), a.branch)
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
