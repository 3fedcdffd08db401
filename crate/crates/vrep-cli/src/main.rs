//! Batch driver for density-trajectory inversion: generate a reference
//! trace, build the matching KS state, reconstruct the potential, and emit
//! columnar snapshot files. See `--help` for the full key listing.

mod commands;
mod config;

use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "vrep",
    version,
    about = "Time-dependent potential inversion on a sinc-DVR lattice",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    /// Flat key-value config file (see the key listing below)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run directory; overrides the `out` config key
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Resume an inversion at this trace time with fresh phase assignment
    #[arg(long, global = true, value_name = "T")]
    restart_time: Option<f64>,

    /// Two-electron model on the full 271-point grid
    #[arg(long, global = true)]
    full_scale: bool,

    /// Eigensolver start seed; 0 keeps the deterministic start
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Propagate the exact system and write the target density trace
    GenerateReference,
    /// Build the initial KS state matching frame 0 of the trace
    InitKs,
    /// Reconstruct the time-dependent KS potential from the trace
    Invert,
    /// Emit columnar snapshot files (x, densities, potentials, errors)
    Report,
    /// Print the effective configuration (defaults + file + flags)
    PrintConfig,
}

fn main() {
    let matches = Cli::command()
        .after_long_help(config::key_help())
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };

    let flags = config::Overrides {
        out: cli.out.clone(),
        restart_time: cli.restart_time,
        full_scale: cli.full_scale,
        seed: cli.seed,
    };
    let cfg = match config::load(cli.config.as_deref(), &flags) {
        Ok(c) => c,
        Err(e) => fail(&e, None),
    };

    let result = match cli.command {
        Cmd::GenerateReference => commands::cmd_generate_reference(&cfg),
        Cmd::InitKs => commands::cmd_init_ks(&cfg),
        Cmd::Invert => commands::cmd_invert(&cfg),
        Cmd::Report => commands::cmd_report(&cfg),
        Cmd::PrintConfig => {
            print!("{}", cfg.dump());
            Ok(())
        }
    };
    if let Err(e) = result {
        fail(&e, Some(&cfg.out));
    }
}

/// Print the failure, leave a marker for numerical failures so the run
/// directory records why it is partial, and exit with the class code.
fn fail(e: &CliError, out: Option<&Path>) -> ! {
    eprintln!("error: {}", e.message());
    if let Some(dir) = out {
        if e.exit_code() == 3 && dir.is_dir() {
            let _ = std::fs::write(dir.join("failure.txt"), format!("{}\n", e.message()));
        }
    }
    std::process::exit(e.exit_code());
}
