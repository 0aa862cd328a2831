//! `mjrobust` — robustness analysis for Markov jump linear systems from the
//! command line. Each subcommand reads a JSON model configuration, runs one
//! workflow, and writes a `report.json` (plus certificates / CSVs) into the
//! output directory.
//!
//! Exit codes: 0 ok or certified, 2 no certificate found (not a disproof),
//! 3 validation failure, 4 solver failure.

mod commands;
mod config;
mod report;

use clap::{Parser, Subcommand};
use commands::AnalysisFlags;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mjrobust",
    version,
    about = "Robust-stability certificates and attenuation norms for Markov jump linear systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Io {
    /// Model configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for reports, certificates, and CSVs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a configuration: schema, chain invariants, positivity,
    /// density evolution, and system shape checks.
    Check {
        #[command(flatten)]
        io: Io,
    },
    /// Compute the disturbance-attenuation norm of a finite-chain model by
    /// bisection over certified levels.
    Hinf {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        flags: AnalysisFlags,
    },
    /// Like `hinf`, but report the result as a stability-radius lower bound.
    Radius {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        flags: AnalysisFlags,
    },
    /// Certify robust stability on a grid over the chain's interval (finite
    /// chains are lifted first and cross-checked exactly).
    GridCert {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        flags: AnalysisFlags,
    },
    /// Rewrite a finite-chain model as an equivalent interval-chain
    /// configuration with cell-constant data.
    Lift {
        #[command(flatten)]
        io: Io,
    },
    /// Monte Carlo simulation of the (optionally perturbed) closed loop;
    /// writes per-run and mean trajectory CSVs.
    Simulate {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        flags: AnalysisFlags,
    },
    /// Discretize a sampled networked loop into an explicit jump model
    /// configuration (finite delay chains only).
    NcsBuild {
        #[command(flatten)]
        io: Io,
    },
}

fn main() -> ExitCode {
    // clap's default exit code for usage errors is 2, which this tool
    // reserves for "no certificate found"; remap usage errors to 3.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match &cli.command {
        Cmd::Check { io } => commands::cmd_check(&io.config, &io.out),
        Cmd::Hinf { io, flags } => commands::cmd_hinf(&io.config, &io.out, flags, false),
        Cmd::Radius { io, flags } => commands::cmd_hinf(&io.config, &io.out, flags, true),
        Cmd::GridCert { io, flags } => commands::cmd_grid_cert(&io.config, &io.out, flags),
        Cmd::Lift { io } => commands::cmd_lift(&io.config, &io.out),
        Cmd::Simulate { io, flags } => commands::cmd_simulate(&io.config, &io.out, flags),
        Cmd::NcsBuild { io } => commands::cmd_ncs_build(&io.config, &io.out),
    };

    match result {
        Ok(code) => ExitCode::from(u8::try_from(code).unwrap_or(1)),
        Err(fail) => {
            eprintln!("error: {}", fail.message);
            ExitCode::from(u8::try_from(fail.code).unwrap_or(1))
        }
    }
}
