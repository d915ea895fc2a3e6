//! `fracbayes`: batch driver for the inversion experiments.

mod error;
mod output;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use fracbayes_core::experiment::{ExperimentConfig, Seeds};

use crate::error::{Failure, InStage, StageError};
use crate::output::{sha256_hex, OutputDir};
use crate::pipeline::Context;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pipeline {
    /// Synthetic observations from the truth on the fine grid.
    Synth,
    /// Truth trajectory, boundary fluxes and fields.
    Forward,
    /// MAP estimate (augmented Tikhonov or IRLS, by prior).
    Map,
    /// Implicit sampling with tempered weights around the stored MAP.
    Implicit,
    /// pCN Markov chain started at the stored MAP.
    Mcmc,
    /// Gaussian (linearized) approximation around the stored MAP.
    Lmap,
    /// Moments, weight tables, ACF, interval bands and KL sweeps.
    Diagnose,
}

impl Pipeline {
    fn name(self) -> &'static str {
        match self {
            Pipeline::Synth => "synth",
            Pipeline::Forward => "forward",
            Pipeline::Map => "map",
            Pipeline::Implicit => "implicit",
            Pipeline::Mcmc => "mcmc",
            Pipeline::Lmap => "lmap",
            Pipeline::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fracbayes", version, about = "Bayesian inversion of multi-term time-fractional diffusion")]
struct Args {
    pipeline: Pipeline,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed replacing every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|source| Failure::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        config.seeds = Seeds::derived(s);
    }
    Ok(config)
}

fn run(args: &Args) -> Result<PathBuf, StageError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Threads(e.to_string()))
            .stage("setup")?;
    }
    let config = load_config(&args.config, args.seed).stage("config")?;
    let hash = sha256_hex(config.to_toml().stage("config")?.as_bytes());
    let out_dir = match &args.out {
        Some(d) => d.clone(),
        None => {
            let stem = args.config.file_stem().map(|s| s.to_string_lossy().into_owned());
            let name = if config.name.is_empty() { stem.unwrap_or_else(|| "run".into()) } else { config.name.clone() };
            PathBuf::from("out").join(name)
        }
    };
    let base = args
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let stage = args.pipeline.name();
    let out = OutputDir::open(&out_dir, &hash, &args.config, config.seeds).stage(stage)?;
    let mut ctx = Context { config, base, out };
    let result = match args.pipeline {
        Pipeline::Synth => pipeline::synth(&mut ctx),
        Pipeline::Forward => pipeline::forward(&mut ctx),
        Pipeline::Map => pipeline::map(&mut ctx),
        Pipeline::Implicit => pipeline::implicit(&mut ctx),
        Pipeline::Mcmc => pipeline::mcmc(&mut ctx),
        Pipeline::Lmap => pipeline::lmap(&mut ctx),
        Pipeline::Diagnose => pipeline::diagnose(&mut ctx),
    };
    result.stage(stage)?;
    Ok(out_dir)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(dir) => {
            eprintln!("{}: outputs in {}", args.pipeline.name(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
