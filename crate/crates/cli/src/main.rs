//! `swdesign`: optimal stepped-wedge designs from the command line.

mod config;
mod report;
mod run;
mod xfile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Mode;
use run::{Invocation, Status};

const EXIT_ERROR: u8 = 1;
const EXIT_NO_ADMISSIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "swdesign", version, about = "Optimal multi-arm stepped-wedge cluster randomized trial designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Covariance, criteria and power of one design.
    Evaluate(Common),
    /// Exhaustive search for the admissible design.
    Search(Common),
    /// Cross-entropy search for large spaces.
    CeSearch(Common),
    /// Optimal designs over a grid of variance components.
    Sensitivity(Common),
    /// Closed-form quantities for two-arm designs.
    Analytic(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Allocation matrix to evaluate (headerless CSV of labels).
    #[arg(long)]
    design: Option<PathBuf>,
    /// Comparator allocation matrix for percentage changes.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Worker threads for searches.
    #[arg(long, env = "SWDESIGN_WORKERS")]
    workers: Option<usize>,
    /// Random seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: runs/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn invocation(command: Command) -> Invocation {
    let (mode, c) = match command {
        Command::Evaluate(c) => (Mode::Evaluate, c),
        Command::Search(c) => (Mode::Search, c),
        Command::CeSearch(c) => (Mode::CeSearch, c),
        Command::Sensitivity(c) => (Mode::Sensitivity, c),
        Command::Analytic(c) => (Mode::Analytic, c),
    };
    Invocation {
        mode,
        config_path: c.config,
        design: c.design,
        compare: c.compare,
        seed: c.seed,
        out: c.out,
        workers: c.workers,
    }
}

fn main() -> ExitCode {
    let inv = invocation(Cli::parse().command);
    let result = match inv.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(|| run::execute(&inv))),
        None => run::execute(&inv),
    };
    match result {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NoAdmissibleDesign) => ExitCode::from(EXIT_NO_ADMISSIBLE),
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(sw_design::Error::CandidateCapExceeded { .. }) = e.downcast_ref::<sw_design::Error>() {
                eprintln!("hint: run `swdesign ce-search` with a ce block, or raise candidate_cap");
            }
            ExitCode::from(EXIT_ERROR)
        }
    }
}
