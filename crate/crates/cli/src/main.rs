//! `auxcl` command-line runner.
//!
//! Exit codes: 0 success, 2 invalid config or usage, 3 failure while running.

use std::path::PathBuf;
use std::process::ExitCode;

use auxcl::experiment::{self, ReportFormat};
use auxcl::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "auxcl", version, about = "Continual-learning experiments with auxiliary head pre-activation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid cell of a config for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Validate the config and build the data without training.
        #[arg(long)]
        dry_run: bool,
        /// Override the worker count of the config.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory; defaults to the config's, then $AUXCL_OUTPUT_DIR.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Aggregate the metrics of a finished run directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            dry_run,
            workers,
            output,
        } => {
            let mut cfg = match experiment::load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if dry_run {
                return match experiment::dry_run(&cfg) {
                    Ok(n) => {
                        println!("config ok: {n} runs");
                        ExitCode::SUCCESS
                    }
                    Err(e) => fail(e),
                };
            }
            let dir = experiment::output_dir(&cfg, output.as_deref());
            match experiment::run_experiment(&cfg, &dir) {
                Ok(runs) => {
                    println!("{} runs written to {}", runs.len(), dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { dir, format } => {
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Text => ReportFormat::Text,
            };
            match experiment::report(&dir) {
                Ok(rows) => {
                    print!("{}", experiment::render_report(&rows, format));
                    let flagged = rows.iter().filter(|r| !r.flags.is_empty()).count();
                    if flagged > 0 {
                        eprintln!("warning: {flagged} cell(s) flagged");
                    }
                    ExitCode::SUCCESS
                }
                // Missing metrics are a problem with the directory, not the config.
                Err(Error::Format(m)) => fail(Error::State(m)),
                Err(e) => fail(e),
            }
        }
    }
}
