use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bgc_cli::runner::{self, CliError, RunOptions};
use bgc_cli::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "bgc",
    about = "Graph condensation with a trigger backdoor: condense, attack, evaluate, defend, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts and results.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seed list overriding the config's.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Replace existing artifacts instead of skipping them.
    #[arg(long)]
    overwrite: bool,
    /// Concurrent trial workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Accept artifacts whose config fingerprint does not match.
    #[arg(long)]
    force: bool,
}

impl CommonArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            seeds: self.seeds.clone(),
            overwrite: self.overwrite,
            workers: self.workers,
            force: self.force,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Condense the dataset cleanly, one synthetic bundle per seed.
    Condense(CommonArgs),
    /// Run the backdoor attack, persisting bundles, generators, and traces.
    Attack(CommonArgs),
    /// Train test models on persisted artifacts and emit results.csv.
    Eval(CommonArgs),
    /// Eval including the configured defenses.
    Defend(CommonArgs),
    /// Aggregate experiment directories into per-study series files.
    Report {
        /// Directory containing experiment output directories.
        #[arg(long)]
        results: PathBuf,
        /// Where to write the series CSV files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Condense(args) => {
            let cfg = ExperimentConfig::from_file(&args.config)?;
            runner::cmd_condense(&cfg, &args.options())
        }
        Command::Attack(args) => {
            let cfg = ExperimentConfig::from_file(&args.config)?;
            runner::cmd_attack(&cfg, &args.options())
        }
        Command::Eval(args) => {
            let cfg = ExperimentConfig::from_file(&args.config)?;
            runner::cmd_eval(&cfg, &args.options(), false)
        }
        Command::Defend(args) => {
            let cfg = ExperimentConfig::from_file(&args.config)?;
            runner::cmd_eval(&cfg, &args.options(), true)
        }
        Command::Report { results, out } => runner::cmd_report(&results, &out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
