//! Command-line driver for the reconstruction pipeline.
//!
//! Commands mirror the inference workflow: generate phantoms, build the
//! template, optionally fit the learned denoiser, reconstruct, derive
//! anomaly maps, score subjects, evaluate the cohort, render slices.
//! `PFODE_LOG={error|info|debug}` controls logging.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfode::commands;
use pfode::config::RunConfig;
use pfode::error::Result;

#[derive(Parser)]
#[command(name = "pfode", version, about = "Deterministic diffusion anomaly-detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat key = value).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker count.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort.
    PhantomGen {
        #[command(flatten)]
        common: Common,
    },
    /// Build the healthy template and latent shape mask.
    Template {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Fit the local-linear denoiser on healthy latents.
    FitDenoiser {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Pseudo-healthy reconstruction of every subject.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// TAUW denoiser file (required for denoiser = local_linear).
        #[arg(long)]
        denoiser: Option<PathBuf>,
    },
    /// Signed anomaly maps from input and reconstructed latents.
    Anomaly {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        recon: PathBuf,
    },
    /// Classifier fit plus per-subject anomaly scores.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        anomaly: PathBuf,
    },
    /// Cohort-level correlations and group separation.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Export an axial slice of a TAUV volume as PGM.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        slice: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::PhantomGen { common } => {
            commands::cmd_phantom_gen(&load_config(common)?, &common.out)
        }
        Command::Template { common, cohort } => {
            commands::cmd_template(&load_config(common)?, cohort, &common.out)
        }
        Command::FitDenoiser { common, cohort } => {
            commands::cmd_fit_denoiser(&load_config(common)?, cohort, &common.out)
        }
        Command::Reconstruct { common, cohort, template, denoiser } => commands::cmd_reconstruct(
            &load_config(common)?,
            cohort,
            template,
            denoiser.as_deref(),
            &common.out,
        ),
        Command::Anomaly { common, cohort, recon } => {
            commands::cmd_anomaly(&load_config(common)?, cohort, recon, &common.out)
        }
        Command::Score { common, cohort, anomaly } => {
            commands::cmd_score(&load_config(common)?, cohort, anomaly, &common.out)
        }
        Command::Evaluate { common, cohort, scores } => {
            commands::cmd_evaluate(&load_config(common)?, cohort, scores, &common.out)
        }
        Command::Render { common, volume, slice } => {
            commands::cmd_render(&load_config(common)?, volume, *slice, &common.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PFODE_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pfode: [{}] {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
