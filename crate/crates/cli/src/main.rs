use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparsedyn::*;

#[derive(Parser)]
#[command(
    name = "sparsedyn",
    version,
    about = "Sparse latent dynamics for imaging time series"
)]
struct Cli {
    /// Config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `test`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "SPARSEDYN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-condition dataset.
    Gen,
    /// Train the autoencoder and per-series VAR models.
    Train,
    /// Group comparisons on a checkpoint.
    Test {
        checkpoint: PathBuf,
        /// Comparison file; defaults to the between/within condition set.
        #[arg(long)]
        groups: Option<PathBuf>,
    },
    /// Export contribution maps from a checkpoint.
    Map {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma_viz: f64,
    },
    /// Solve one lasso problem and print its knots.
    Lasso {
        x: PathBuf,
        y: PathBuf,
        #[arg(long)]
        lambda: f64,
    },
    /// Train all regimes over the lambda grid.
    Ablate,
}

fn need<T>(v: Option<T>, flag: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| anyhow::Error::new(sparsedyn_core::Error::Argument(format!("{flag} is required"))))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads(cli.threads)?;
    let stdout = &mut std::io::stdout();
    match cli.command {
        Command::Gen => {
            cmd_gen(&need(cli.config, "--config")?, cli.seed, &need(cli.out, "--out")?)?;
        }
        Command::Train => {
            cmd_train(&need(cli.config, "--config")?, cli.seed, cli.out.as_deref())?;
        }
        Command::Test { checkpoint, groups } => {
            let csv = cmd_test(&checkpoint, groups.as_deref(), cli.out.as_deref())?;
            if cli.out.is_none() {
                stdout.write_all(csv.as_bytes())?;
            }
        }
        Command::Map { checkpoint, gamma_viz } => {
            cmd_map(&checkpoint, &need(cli.out, "--out")?, gamma_viz)?;
        }
        Command::Lasso { x, y, lambda } => {
            let (csv, _) = cmd_lasso(&x, &y, lambda)?;
            stdout.write_all(csv.as_bytes())?;
        }
        Command::Ablate => {
            let csv = cmd_ablate(&need(cli.config, "--config")?, cli.seed, cli.out.as_deref())?;
            stdout.write_all(csv.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
