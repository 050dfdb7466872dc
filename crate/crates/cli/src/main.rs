use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uniflow_cli::commands::{self, Options};
use uniflow_cli::{exit, Failure};

/// Event-driven simulation and piecewise-linear sensitivity analysis of
/// mechanical systems with unilateral constraints.
#[derive(Parser)]
#[command(name = "uniflow", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario; writes trajectory.csv and events.json.
    Simulate(RunArgs),
    /// Flow B-derivative at the scenario's initial state; writes bderiv.json.
    Bderiv(RunArgs),
    /// Poincaré, stability, controllability and sweep analyses; writes report.json.
    Analyze(RunArgs),
    /// Print the built-in systems and their default parameters.
    ListSystems,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Check derivative images against one-sided finite differences.
    #[arg(long)]
    validate: bool,
    /// Print the scenario with all defaults filled in and exit.
    #[arg(long)]
    dump_config: bool,
    /// Seed for randomly drawn directions.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<i32, Failure> {
    let (args, f): (RunArgs, fn(&_, &_, &Options) -> Result<i32, Failure>) = match cli.cmd {
        Cmd::ListSystems => {
            print!("{}", commands::list_systems());
            return Ok(exit::OK);
        }
        Cmd::Simulate(a) => (a, commands::simulate),
        Cmd::Bderiv(a) => (a, commands::bderiv),
        Cmd::Analyze(a) => (a, commands::analyze),
    };
    if args.dump_config {
        print!("{}", commands::dump_config(&args.config)?);
        return Ok(exit::OK);
    }
    let (cfg, inputs) = commands::prepare(&args.config)?;
    let opts = Options { out: args.out, validate: args.validate, seed: args.seed };
    f(&cfg, &inputs, &opts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::SCHEMA } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    };
    ExitCode::from(code as u8)
}
