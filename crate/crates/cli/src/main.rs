use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metafl_cli::{cmd_compare, cmd_diagnose, cmd_run, CliError};

/// Federated-learning simulator with a meta-aggregator and FedAvg baseline.
#[derive(Parser)]
#[command(name = "metafl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv, summary.json, config_echo.toml.
    Run {
        /// Config file or preset name.
        config: String,
        #[arg(short, long)]
        out: PathBuf,
        /// Drop the wall-clock column so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Run two configs on the same federation; b is the baseline.
    Compare {
        config_a: String,
        config_b: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// One round from the initial model plus theory diagnostics.
    Diagnose {
        config: String,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, no_timing } => {
            let s = cmd_run(&config, &out, !no_timing)?;
            println!(
                "terminal accuracy {:.4}, loss {:.4}, alpha {}",
                s.terminal_accuracy, s.terminal_loss, s.alpha_final
            );
        }
        Command::Compare { config_a, config_b, out } => {
            let s = cmd_compare(&config_a, &config_b, &out)?;
            println!(
                "winner {}: terminal accuracy a {:.4} vs b {:.4}",
                s.winner, s.terminal_accuracy_a, s.terminal_accuracy_b
            );
        }
        Command::Diagnose { config, out } => {
            let d = cmd_diagnose(&config, &out)?;
            println!(
                "contraction {:.4}, jensen gap {:.3e}, kl {:.4}",
                d.contraction_estimate, d.jensen_gap, d.kl_diagnostic
            );
        }
    }
    Ok(())
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metafl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
