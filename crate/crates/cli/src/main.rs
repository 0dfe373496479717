//! `sparcl-kit`: dataset generation, training, ablation sweeps, and
//! diagnostic exports for the toy contrastive trainer.
//!
//! Exit codes: 0 success, 1 bad config or flags, 2 file I/O, 3 numeric
//! divergence during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use sparcl_cli::{
    cmd_ablate, cmd_gen_data, cmd_inject_demo, cmd_margin_plot, cmd_train, print_json,
    threads_from_env, AblateStdout, CliError, TrainStdout,
};

#[derive(Parser)]
#[command(
    name = "sparcl-kit",
    version,
    about = "Toy contrastive trainer with synthetic hard negatives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file from the [world] section of a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file to write; a .meta.json companion appears next to it.
        #[arg(long)]
        out: PathBuf,
        /// Number of sample groups.
        #[arg(long)]
        count: u64,
        /// Overrides both the world seed and the trainer seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with a config and write metrics.csv, results.json, params.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the world seed and the trainer seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep margin modes over seeds and write ablation.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated margin modes (none, fixed, adaptive, adaptive_inverse).
        #[arg(long)]
        modes: String,
        /// Comma-separated trainer seeds.
        #[arg(long)]
        seeds: String,
        /// Overrides the base world seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export the adaptive margin curve as CSV.
    MarginPlot {
        #[arg(long, default_value_t = 0.005)]
        m0: f64,
        #[arg(long, allow_negative_numbers = true, default_value_t = -0.02)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// CSV file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject an image embedding into a sequence file's padding rows.
    InjectDemo {
        /// Embedding-sequence file to transform.
        sequence: PathBuf,
        /// Single-row embedding file supplying the image vector.
        image: PathBuf,
        /// Sequence file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => {
            let summary = cmd_gen_data(&config, &out, count, seed)?;
            print_json(&summary);
        }
        Command::Train { config, out, seed } => {
            let results = cmd_train(&config, &out, seed)?;
            print_json(&TrainStdout {
                out: out.display().to_string(),
                steps: results.steps,
                final_loss: results.final_loss,
                overall_accuracy: results.eval.overall,
            });
        }
        Command::Ablate {
            config,
            out,
            modes,
            seeds,
            seed,
        } => {
            let threads = threads_from_env()?;
            let table = cmd_ablate(&config, &out, &modes, &seeds, seed, threads)?;
            print_json(&AblateStdout {
                out: out.display().to_string(),
                cells: table.cells.len(),
                failed_cells: table.cells.iter().filter(|c| c.outcome.is_err()).count(),
            });
        }
        Command::MarginPlot {
            m0,
            beta,
            gamma,
            out,
        } => {
            let rows = cmd_margin_plot(m0, beta, gamma, &out)?;
            println!("{{\"out\":{:?},\"rows\":{rows}}}", out.display().to_string());
        }
        Command::InjectDemo {
            sequence,
            image,
            out,
        } => {
            let summary = cmd_inject_demo(&sequence, &image, &out)?;
            print_json(&summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
