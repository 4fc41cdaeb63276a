use clap::{Parser, Subcommand};
use gba_sim::cli::{cmd_clean, cmd_compare, cmd_run, cmd_sweep, exit_code_for};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "gba-sim",
    about = "Contrastive training strategy simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.csv
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every listed strategy on identical data and emit compare.csv
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-sample time over a bandwidth/latency grid
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Partition a JSONL pair-record file per the cleaning rules
    Clean {
        /// Input JSONL file of pair records
        #[arg(long = "config")]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        threshold: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out, seed } => cmd_run(config, out, *seed),
        Command::Compare { config, out, seed } => cmd_compare(config, out, *seed),
        Command::Sweep { config, out } => cmd_sweep(config, out),
        Command::Clean {
            input,
            out,
            threshold,
        } => cmd_clean(input, out, *threshold),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
