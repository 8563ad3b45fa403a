use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qatlab_cli::{run, Command, RunManifest, OUT_ENV};

#[derive(Parser)]
#[command(name = "qatlab", version, about = "Quantization-aware training with learned surrogate Jacobians")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $QATLAB_OUT or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and harness trials.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and write metrics.csv and summary.json.
    Train,
    /// Run one diagnostics harness.
    Diagnose { harness: String },
    /// Run the [sweep] grid of a configuration.
    Sweep,
    /// Run every acceptance check and write report.json.
    VerifyAll,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let output_dir =
        cli.out.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let command = match cli.command {
        Cmd::Train => Command::Train,
        Cmd::Diagnose { harness } => Command::Diagnose(harness),
        Cmd::Sweep => Command::Sweep,
        Cmd::VerifyAll => Command::VerifyAll,
    };
    let manifest =
        RunManifest { command, config_path: cli.config, output_dir, seed_override: cli.seed, jobs: cli.jobs };
    match run(&manifest) {
        Ok(outcome) => {
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
