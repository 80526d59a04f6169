use std::fs::File;
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use lifted_cli::commands::{cmd_infer_trace, cmd_propcheck, cmd_train};
use lifted_core::diagnostics::{Suite, SuiteConfig};

#[derive(Parser)]
#[command(name = "lifted", version, about = "Train and diagnose lifted feed-forward networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every run of an experiment config for every seed.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run randomized checks of the objective inequalities and limits.
    Propcheck {
        /// prop1, prop2, prop3, prop4, prop5, eq14, eq18 or all.
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break interpolation in the prop2 suite (its trials are then skipped).
        #[arg(long)]
        non_interpolating: bool,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-sweep objective and residual of inference on one test sample.
    InferTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sample: usize,
        /// Inference phase of two-phase objectives (0 or 1).
        #[arg(long, default_value_t = 0)]
        phase: usize,
        /// Output CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config } => cmd_train(&config).map(|_| true),
        Command::Propcheck {
            suite,
            trials,
            seed,
            non_interpolating,
            csv,
        } => {
            let cfg = SuiteConfig {
                non_interpolating,
                ..SuiteConfig::new(suite, trials, seed)
            };
            cmd_propcheck(&cfg, csv.as_deref()).map(|(ok, _)| ok)
        }
        Command::InferTrace {
            config,
            sample,
            phase,
            out,
        } => {
            match out {
                Some(p) => {
                    let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                    cmd_infer_trace(&config, sample, phase, BufWriter::new(f))?
                }
                None => cmd_infer_trace(&config, sample, phase, io::stdout().lock())?,
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
