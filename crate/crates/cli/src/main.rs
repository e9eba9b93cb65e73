use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netsched_cli::commands::{self, FiniteArgs, RegionArgs, RiccatiArgs, SimulateArgs, SolveArgs, ValidateArgs};
use netsched_cli::{exit, exit_code};

/// Sensor scheduling over lossy networks.
#[derive(Debug, Parser)]
#[command(name = "netsched", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Solve the control Riccati equation.
    Riccati(RiccatiArgs),
    /// Solve the scheduling problem on a state grid.
    Solve(SolveArgs),
    /// Finite-horizon tables for every stage.
    Finite(FiniteArgs),
    /// Closed-loop Monte Carlo simulation.
    Simulate(SimulateArgs),
    /// Map the stabilizing loss-rate region along rays.
    Region(RegionArgs),
    /// Check a configuration and report model assumptions.
    Validate(ValidateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    let res = match &cli.cmd {
        Cmd::Riccati(a) => commands::riccati(a),
        Cmd::Solve(a) => commands::solve(a),
        Cmd::Finite(a) => commands::finite(a),
        Cmd::Simulate(a) => commands::simulate(a),
        Cmd::Region(a) => commands::region(a),
        Cmd::Validate(a) => commands::validate(a),
    };
    match res {
        Ok(text) => {
            if !text.is_empty() {
                println!("{}", text.trim_end());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
