//! `taskvec`: train models, edit them with task vectors and run the
//! experiment suites.

mod commands;
mod config;
mod exit;
mod expr;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taskvec::coeff_search::CoeffGrid;

use crate::config::Overrides;
use crate::exit::{CliResult, Failure};

#[derive(Debug, Parser)]
#[command(name = "taskvec", version, about = "Task-vector arithmetic over model checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// Run configuration (strict JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for training and experiments.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Coefficient grid override, "a:b:step" or a comma list.
    #[arg(long, global = true)]
    grid: Option<CoeffGrid>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on one task and write final.tvkp, snapshots and a manifest.
    Train {
        /// Task preset name or a task_id listed in the config.
        #[arg(long)]
        task: String,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Task-vector algebra on files.
    #[command(subcommand)]
    Vector(VectorCmd),
    /// Edit a checkpoint: base + sum of lambda_i * vector_i, or base + lambda * expr.
    Apply {
        base: PathBuf,
        #[arg(long = "vector")]
        vectors: Vec<PathBuf>,
        /// JSON expression file (see README).
        #[arg(long, conflicts_with = "vectors")]
        expr: Option<PathBuf>,
        /// Coefficients; one per vector, or a single value for all.
        #[arg(long = "lambda", allow_negative_numbers = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named experiment and write its report and plot data.
    Experiment {
        /// One of forget, add, analogy, domain, cosim, trajectory, ensemble, lr-seed.
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate plot data from a saved report.json.
    PlotData {
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Print metadata, tensors and hashes of a TVKP file.
    Inspect { file: PathBuf },
}

#[derive(Debug, Subcommand)]
enum VectorCmd {
    /// ft - pre.
    Diff { ft: PathBuf, pre: PathBuf, #[arg(long)] out: PathBuf },
    Negate { input: PathBuf, #[arg(long)] out: PathBuf },
    /// Sum of one or more vectors.
    Add {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// c + (b - a): A is to B as C is to the result.
    Analogy { a: PathBuf, b: PathBuf, c: PathBuf, #[arg(long)] out: PathBuf },
    /// Random vector with the per-layer norms of the input.
    Random {
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    /// Write a task's samples as CSV (split,label,x0..).
    Export {
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn overrides(common: &Common, out: Option<PathBuf>) -> Overrides {
    Overrides {
        out,
        seed: common.seed,
        grid: common.grid.clone(),
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("TASKVEC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("TASKVEC_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train { task, init, out, common } => {
            commands::train(common.config.as_deref(), &overrides(&common, out), &task, init.as_deref())
        }
        Command::Vector(v) => match v {
            VectorCmd::Diff { ft, pre, out } => commands::vector_diff(&ft, &pre, &out),
            VectorCmd::Negate { input, out } => commands::vector_negate(&input, &out),
            VectorCmd::Add { inputs, out } => commands::vector_add(&inputs, &out),
            VectorCmd::Analogy { a, b, c, out } => commands::vector_analogy(&a, &b, &c, &out),
            VectorCmd::Random { input, seed, out } => commands::vector_random(&input, seed, &out),
        },
        Command::Apply { base, vectors, expr, lambdas, out } => {
            commands::apply(&base, &vectors, expr.as_deref(), &lambdas, &out)
        }
        Command::Experiment { name, out, common } => {
            commands::experiment(name.as_deref(), common.config.as_deref(), &overrides(&common, out))
        }
        Command::PlotData { report, out } => commands::plot_data(&report, &out),
        Command::Dataset(DatasetCmd::Export { task, out, common }) => {
            commands::dataset_export(common.config.as_deref(), &overrides(&common, None), &task, &out)
        }
        Command::Inspect { file } => commands::inspect(&file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
