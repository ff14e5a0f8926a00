use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gfn_pathfind::harness;

/// Shortest-path learning on large discrete graphs.
#[derive(Parser)]
#[command(name = "gfn-pathfind", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy network on the configured environment.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Zero wall-clock columns so reruns are byte-identical.
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint under the sampled/greedy/beam protocols.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Build exact breadth-first distance tables.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustively verify the exact-policy algebra on a small environment.
    VerifyTheory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probe-train across regularization coefficients and recommend one.
    LambdaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Render SVG charts from metrics, eval and sweep CSV files.
    Plot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            deterministic,
        } => harness::cmd_train(&config, &out, seed, deterministic),
        Command::Eval {
            config,
            out,
            seed,
            deterministic,
        } => harness::cmd_eval(&config, &out, seed, deterministic),
        Command::Oracle { config, out } => harness::cmd_oracle(&config, &out),
        Command::VerifyTheory { config, out } => {
            match harness::cmd_verify_theory(&config, out.as_deref()) {
                Err(e) => Err(e),
                Ok(report) => {
                    for line in &report.lines {
                        println!("{line}");
                    }
                    if report.failures > 0 {
                        eprintln!("{} check(s) failed", report.failures);
                        return ExitCode::from(2);
                    }
                    Ok(())
                }
            }
        }
        Command::LambdaSweep {
            config,
            out,
            seed,
            deterministic,
        } => harness::cmd_lambda_sweep(&config, &out, seed, deterministic).map(|outcome| {
            for row in &outcome.rows {
                println!(
                    "lambda {:>10}: solve rate {:.3}, mean length {:.3}",
                    row.lambda, row.solve_rate, row.mean_length
                );
            }
            match outcome.recommended {
                Some(l) => println!("recommended lambda = {l}"),
                None => println!("no coefficient reached solve rate 1.0 on the probe set"),
            }
        }),
        Command::Plot { config, out } => harness::cmd_plot(&config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
