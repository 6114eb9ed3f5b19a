use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psi_manifold::cli;
use psi_manifold::verify::VerifyOptions;

/// Optimization on the scale-invariant quotient of batch-normalized MLPs.
#[derive(Parser)]
#[command(name = "psi", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a JSON config and write its metrics CSV.
    Train {
        #[arg(short = 'c', long)]
        config: PathBuf,
        /// Defaults to the config's `output` field.
        #[arg(short = 'o', long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical property suite and write a pass/fail report.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long, default_value = "report.txt")]
        out: PathBuf,
        #[arg(long, hide = true)]
        inject_bn_fault: bool,
    },
    /// Train every config in a directory, one CSV each plus summary.csv.
    Sweep {
        #[arg(short = 'd', long)]
        dir: PathBuf,
        #[arg(short = 'o', long)]
        out: PathBuf,
        #[arg(short = 'j', long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    cli::init_logging();
    let code = match Args::parse().cmd {
        Cmd::Train { config, out } => cli::cmd_train(&config, out.as_deref()),
        Cmd::Verify { seed, out, inject_bn_fault } => cli::cmd_verify(
            seed,
            &out,
            VerifyOptions {
                seed,
                inject_bn_fault,
            },
        ),
        Cmd::Sweep { dir, out, jobs } => cli::cmd_sweep(&dir, &out, jobs),
    };
    ExitCode::from(code as u8)
}
