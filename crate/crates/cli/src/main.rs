//! `pgb`: prune, evaluate, benchmark and inspect grouped models.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pgb_core::{ImportanceKind, PgbError};

/// Exit codes.
const EXIT_BUDGET: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "pgb",
    version,
    about = "Permutation-and-grouping one-shot pruning toolkit"
)]
struct Cli {
    /// Worker threads for parallel pruning and compensation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a dense model archive into grouped form.
    Prune(PruneArgs),
    /// Compare dense and pruned model outputs on input activations.
    Eval(EvalArgs),
    /// Time grouped against dense linear layers over a sweep of group counts.
    Bench(BenchArgs),
    /// List the tensors and grouping records of an archive.
    Inspect(InspectArgs),
    /// Write a random dense model (and optionally inputs) seeded by PGB_SEED.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Fraction of prunable parameters to keep.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tau: f64,
    #[arg(long, default_value_t = 6)]
    pub gmax: usize,
    #[arg(long, default_value_t = 6)]
    pub nperm: usize,
    #[arg(long, default_value = "magnitude2", value_parser = parse_importance)]
    pub importance: ImportanceKind,
    /// Gradient archive (`<tensor>.grad.<k>`), required by `--importance fisher`.
    #[arg(long)]
    pub grads: Option<PathBuf>,
    /// Calibration activations; when given, retained weights are compensated.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Ridge strength for compensation.
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Report path (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Sequence length used for the MAC figures in the report.
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub pruned: PathBuf,
    /// Archive of `S × d` input activation matrices.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Calibration activations for an on-the-fly compensated comparison.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    /// Also score a random grouping of identical size drawn from this seed.
    #[arg(long)]
    pub random_baseline: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 768)]
    pub rows: usize,
    #[arg(long, default_value_t = 768)]
    pub cols: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6")]
    pub groups: Vec<usize>,
    /// Timed repetitions per configuration (at least 30).
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub archive: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 128)]
    pub dffn: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an activation archive for `eval` / `--calib`.
    #[arg(long)]
    pub inputs_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

fn parse_importance(s: &str) -> Result<ImportanceKind, String> {
    s.parse().map_err(|e: PgbError| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PgbError>() {
        Some(PgbError::BudgetInfeasible { .. }) => EXIT_BUDGET,
        Some(PgbError::Io(_) | PgbError::Format(_) | PgbError::Json(_)) => EXIT_FORMAT,
        Some(_) => EXIT_VALIDATION,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_FORMAT,
        None => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    let result = match cli.command {
        Command::Prune(a) => commands::prune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
