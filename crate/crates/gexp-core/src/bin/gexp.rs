//! `gexp` — sublinear-expectation experiments from JSON configs.
//!
//! Each subcommand names one experiment kind; the config file carries the
//! substance and must declare the same kind. Reports go to stdout or
//! `--out` as JSON; logs go to stderr (level via `GEXP_LOG`, default
//! `info`). Exit codes: 0 all checks passed, 1 an acceptance check
//! failed, 2 configuration or usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gexp_core::config::{ExperimentKind, RunConfig};
use gexp_core::runner::{run, RunOptions};
use gexp_core::{GexpError, Result};

#[derive(Parser)]
#[command(
    name = "gexp",
    version,
    about = "Numerical engine for expectations under volatility uncertainty",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the nonlinear heat equation for each battery functional
    Gheat(RunArgs),
    /// Evaluate the battery by PDE backward recursion
    Expect(RunArgs),
    /// Evaluate the battery by sup-over-policies Monte Carlo
    Mc(RunArgs),
    /// Estimate the capacity of a path event
    Capacity(RunArgs),
    /// Verify the measure-change identity PDE-vs-weighted-MC
    Girsanov(RunArgs),
    /// Check the exponential-moment criterion for a drift integrand
    Novikov(RunArgs),
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Gheat(_) => ExperimentKind::Gheat,
            Command::Expect(_) => ExperimentKind::Expect,
            Command::Mc(_) => ExperimentKind::Mc,
            Command::Capacity(_) => ExperimentKind::Capacity,
            Command::Girsanov(_) => ExperimentKind::Girsanov,
            Command::Novikov(_) => ExperimentKind::Novikov,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Gheat(a)
            | Command::Expect(a)
            | Command::Mc(a)
            | Command::Capacity(a)
            | Command::Girsanov(a)
            | Command::Novikov(a) => a,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Write the JSON report here instead of stdout
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Override the config's random seed
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config's Monte Carlo path count
    #[arg(long)]
    paths: Option<usize>,

    /// Worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,

    /// Also write per-path CSV files next to --out
    #[arg(long)]
    dump_paths: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GEXP_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<ExitCode> {
    let args = cli.command.args();
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| GexpError::Config(format!("cannot size the thread pool: {e}")))?;
    }
    if args.dump_paths && args.out.is_none() {
        return Err(GexpError::Config(
            "--dump-paths writes CSV files next to the report; pass --out as well".to_string(),
        ));
    }

    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        GexpError::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let config = RunConfig::from_json(&text)?;
    let expected = cli.command.kind();
    if config.experiment != expected {
        return Err(GexpError::Config(format!(
            "subcommand `{expected}` does not match the config's experiment `{}`",
            config.experiment
        )));
    }

    let opts = RunOptions {
        seed: args.seed,
        paths: args.paths,
        dump_base: args.dump_paths.then(|| args.out.clone().expect("checked above")),
    };
    let outcome = run(config, &opts)?;

    let mut rendered = serde_json::to_string_pretty(&outcome.report)?;
    rendered.push('\n');
    match &args.out {
        Some(path) => {
            std::fs::write(path, rendered).map_err(|e| {
                GexpError::Config(format!("cannot write {}: {e}", path.display()))
            })?;
            log::info!("report written to {}", path.display());
        }
        None => print!("{rendered}"),
    }
    for f in &outcome.csv_files {
        log::info!("paths written to {}", f.display());
    }

    if outcome.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        log::warn!("one or more acceptance checks failed; see the report");
        Ok(ExitCode::FAILURE)
    }
}
