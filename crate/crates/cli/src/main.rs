use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lsctl::commands::{run, Command, Invocation};

#[derive(Parser)]
#[command(
    name = "lsctl",
    version,
    about = "SOS synthesis and validation of stochastic feedback controllers"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the relaxation hierarchy and write reports, solutions and samples.
    Solve(Common),
    /// Monte Carlo rollouts of the controllers from a previous `solve`.
    Simulate(SimArgs),
    /// Lyapunov audit, oracle sandwich and suboptimality bound for solved degrees.
    Verify(Common),
    /// Finite-difference reference solution (one state variable only).
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    /// Problem configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Degree range `A:B` or a single degree; defaults to the configured hierarchy.
    #[arg(long, value_parser = parse_degrees)]
    degrees: Option<(u32, u32)>,
    /// Replace existing results.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Base seed; run `i` uses `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo runs.
    #[arg(long)]
    runs: Option<usize>,
}

fn parse_degrees(s: &str) -> Result<(u32, u32), String> {
    let num = |t: &str| {
        t.trim()
            .parse::<u32>()
            .map_err(|e| format!("invalid degree '{t}': {e}"))
    };
    match s.split_once(':') {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b)?);
            if a > b {
                return Err(format!("empty range {a}:{b}"));
            }
            Ok((a, b))
        }
        None => num(s).map(|d| (d, d)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, common, seed, runs) = match cli.command {
        Cmd::Solve(c) => (Command::Solve, c, None, None),
        Cmd::Verify(c) => (Command::Verify, c, None, None),
        Cmd::Oracle(c) => (Command::Oracle, c, None, None),
        Cmd::Simulate(s) => (Command::Simulate, s.common, s.seed, s.runs),
    };
    let inv = Invocation {
        command,
        config: common.config,
        out: common.out,
        degrees: common.degrees,
        seed,
        runs,
        force: common.force,
    };
    match run(&inv) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
