use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

mod config;
mod error;
mod output;
mod report;
mod tasks;

use config::{Loaded, Task};
use error::{CliError, CliResult};

/// Exact EBM/ARM experiments over small prefix trees.
#[derive(Debug, Parser)]
#[command(name = "softseq", version)]
struct Args {
    /// Task to run; must match the `task` field of the config.
    #[arg(value_enum)]
    task: Task,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, overriding the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

const BUDGET_VAR: &str = "SOFTSEQ_STATE_BUDGET";

fn state_budget() -> CliResult<usize> {
    match std::env::var(BUDGET_VAR) {
        Err(_) => Ok(softseq::seqspace::DEFAULT_STATE_BUDGET),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Schema(format!("{BUDGET_VAR} must be a non-negative integer, got {v:?}"))),
    }
}

fn run(args: Args) -> CliResult<()> {
    if let Some(workers) = args.workers {
        if workers == 0 {
            return Err(CliError::Schema("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Schema(e.to_string()))?;
    }
    let budget = state_budget()?;
    let loaded = Loaded::read(&args.config)?;
    if loaded.config.task != args.task {
        return Err(CliError::Schema(format!(
            "config describes a {:?} task, not {:?}",
            loaded.config.task, args.task
        )));
    }
    let out = match (&args.out, &loaded.config.out_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => loaded.resolve(dir),
        (None, None) => return Err(CliError::Schema("no output directory: set out_dir or pass --out".into())),
    };
    let ctx = tasks::Context { loaded, budget };
    match args.task {
        Task::Convert => tasks::convert(&ctx, out),
        Task::Partition => tasks::partition(&ctx, out),
        Task::Sample => tasks::sample(&ctx, out),
        Task::Verify => tasks::verify(&ctx, out),
        Task::Train => tasks::train(&ctx, out),
        Task::Report => report::report(&ctx, out),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("softseq: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
