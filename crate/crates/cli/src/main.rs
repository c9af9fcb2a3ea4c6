//! `avsrerank` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use avsrerank::fusion::{DEFAULT_ALPHA, DEFAULT_K};
use avsrerank::{Metric, MissingPolicy, Normalization, PoolingMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "avsrerank", version, about = "Rerank and evaluate ad-hoc video search runs")]
pub struct Cli {
    /// Worker threads for per-query parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rerank a run with frame-level similarities or label spreading.
    Rerank(RerankArgs),
    /// Score a run against qrels.
    Eval(EvalArgs),
    /// Per-query metric deltas between two runs.
    Compare(CompareArgs),
    /// Evaluate a grid of fusion parameters.
    Sweep(SweepArgs),
    /// Convert between the text interchange format and EMBS.
    Convert(ConvertArgs),
    /// Print the header and counts of an embedding store.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Fuse,
    Labelspread,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Closed,
    Iterative,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Frame embedding store (EMBS or text interchange).
    #[arg(long)]
    pub store: PathBuf,
    /// Query embedding store; required for `--method fuse`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value = "none")]
    pub norm: Normalization,
    #[arg(long, default_value = "max")]
    pub pool: PoolingMode,
    #[arg(long, default_value = "error")]
    pub missing: MissingPolicy,
    #[arg(long, value_enum, default_value_t = Method::Fuse)]
    pub method: Method,
    /// Run tag for the output (defaults to the input tag).
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Label spreading: propagation weight in (0, 1).
    #[arg(long, default_value_t = 0.99)]
    pub ls_alpha: f64,
    /// Label spreading: number of top-ranked seed videos.
    #[arg(long, default_value_t = 10)]
    pub ls_seeds: usize,
    /// Label spreading: fixed kernel width (median heuristic when absent).
    #[arg(long)]
    pub ls_sigma: Option<f64>,
    #[arg(long, value_enum, default_value_t = SolverArg::Closed)]
    pub ls_solver: SolverArg,
    #[arg(long, default_value_t = 1000)]
    pub ls_max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub ls_tol: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value = "infap")]
    pub metric: Metric,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value = "infap")]
    pub metric: Metric,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// TOML grid specification.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input store; EMBS is detected by its magic bytes, anything else is
    /// read as text.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep text input vectors as given instead of L2-normalizing them.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub store: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AVSRERANK_LOG", "warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("avsrerank: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
