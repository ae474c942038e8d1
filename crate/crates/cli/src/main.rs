use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use contsysid_cli::commands::{self, EvalInputs};
use contsysid_cli::config::{self, FlagOverrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "contsysid",
    version,
    about = "Continuous-time neural state-space identification"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the training-record generator seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel loss evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write clean and noisy RLC records.
    Generate,
    /// Fit the configured model.
    Train,
    /// Simulate saved parameters on a record and report metrics.
    Eval {
        /// Parameter file; defaults to params.csv in the output directory.
        #[arg(long)]
        params: Option<PathBuf>,
        /// CSV record to evaluate instead of the configured one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Training report supplying the fitted initial state.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write loss traces and trajectories of a report as long-format CSV.
    Export {
        #[arg(long)]
        report: PathBuf,
    },
    /// Print the JSON schema of the run configuration.
    Schema,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let flags = FlagOverrides {
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out.clone(),
    };
    let cfg = RunConfig::load(cli.config.as_deref(), std::env::vars(), &flags)?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    log::info!("config sha256 {}", cfg.hash());
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Schema => println!("{}", serde_json::to_string_pretty(&config::schema())?),
        Command::Generate => {
            let sidecar = commands::generate(&load_config(&cli)?)?;
            println!(
                "wrote {} and {}",
                sidecar.clean.display(),
                sidecar.noisy.display()
            );
            println!("SNR (dB): {:?}", sidecar.snr_db);
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let run = commands::train(&cfg)?;
            println!("training record, {:.1} s:", run.fit.wall_seconds);
            print!("{}", run.metrics);
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Eval {
            params,
            dataset,
            report,
        } => {
            let cfg = load_config(&cli)?;
            let inputs = EvalInputs {
                params: params.clone(),
                dataset: dataset.clone(),
                report: report.clone(),
            };
            let result = commands::eval(&cfg, &inputs)?;
            println!("{} record:", result.dataset);
            print!("{}", result.metrics);
        }
        Command::Export { report } => {
            let out = match &cli.out {
                Some(dir) => dir.clone(),
                None => report.parent().map(PathBuf::from).unwrap_or_default(),
            };
            let path = commands::export(report, &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
