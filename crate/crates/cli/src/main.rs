use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use sparsebyz_cli::commands::{cmd_make_mask, cmd_plot, cmd_run, MakeMaskArgs, RunArgs};
use sparsebyz_cli::config::MaskMethod;
use sparsebyz_cli::CliError;

#[derive(Parser)]
#[command(
    name = "sparsebyz",
    version,
    about = "Federated learning simulator with sparse Byzantine attacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its metrics CSV and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Metrics CSV path; the manifest goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Generate an attack mask file.
    MakeMask {
        #[arg(long)]
        method: MaskMethod,
        #[arg(long)]
        delta: f64,
        /// Mark the critical layers (first conv, last FC) fully.
        #[arg(long, default_value_t = false, action = ArgAction::Set)]
        critical: bool,
        /// Occupancy cap on the final FC layer (force only).
        #[arg(long)]
        fc_cap: Option<f64>,
        /// mlp2:IN:HIDDEN:CLASSES or cnn2:ROWS:COLS:C1:C2:CLASSES
        #[arg(long)]
        model: String,
        /// IDX image file, or `blobs` for synthetic data (force only).
        #[arg(long)]
        data: Option<String>,
        /// IDX label file matching --data.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        clients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot one metric from one or more metrics CSVs as SVG.
    Plot {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let s = cmd_run(&RunArgs {
                config,
                out,
                seed,
                threads,
            })?;
            println!(
                "{} rows, final accuracy {:.4}, config {}",
                s.rows, s.final_accuracy, s.manifest.config_hash
            );
        }
        Command::MakeMask {
            method,
            delta,
            critical,
            fc_cap,
            model,
            data,
            labels,
            steps,
            batch_size,
            clients,
            seed,
            data_seed,
            out,
        } => {
            let s = cmd_make_mask(&MakeMaskArgs {
                method,
                delta,
                critical,
                fc_cap,
                model,
                data,
                labels,
                steps,
                batch_size,
                clients,
                seed,
                data_seed,
                out,
            })?;
            print!("{}", s.occupancy);
        }
        Command::Plot {
            inputs,
            metric,
            out,
        } => cmd_plot(&inputs, &metric, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
