use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use homogenize_lab::runner::{self, ExperimentConfig, RunOptions};
use homogenize_lab::LabError;

#[derive(Parser)]
#[command(name = "homogenize-lab", version, about = "Monte Carlo homogenization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the homogenized coefficients only.
    Coefficients {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), LabError> {
    match cmd {
        Command::Run { config, out, threads, seed } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let report = runner::run(&cfg, &RunOptions { out_dir: out, threads, seed })?;
            log::info!("wrote {} files to {}", report.files.len(), report.out_dir.display());
        }
        Command::Coefficients { config, out, threads } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let report = runner::coefficients(&cfg, &RunOptions { out_dir: out, threads, seed: None })?;
            log::info!("coefficients written to {}", report.out_dir.join("coefficients.json").display());
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let r = cfg.validate()?;
            println!(
                "ok: {} in d = {}, dtau = {}, T_GK = {}",
                cfg.experiment.name(),
                r.measure.dim(),
                r.dtau,
                r.t_gk
            );
        }
    }
    Ok(())
}
