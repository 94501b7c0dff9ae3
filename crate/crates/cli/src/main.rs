mod config;
mod data;
mod evaluate;
mod fit;
mod manifest;
mod models;
mod simulate;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use smcvi::trainer::Mode;

use config::{config_error, Config, ConfigError, ModelKind};
use evaluate::Task;
use manifest::{Outputs, RunManifest, MANIFEST_FILE};

/// Marks failures of the numerics (non-finite values, degenerate weights,
/// non-positive-definite matrices); these exit with status 3.
#[derive(Debug)]
pub struct NumericFailure;

impl fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("numeric failure")
    }
}

#[derive(Debug, Parser)]
#[command(name = "smcvi", version, about = "Variational SMC experiments for state-space models")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Training mode; overrides `train.mode`.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Particle count; overrides the count of the running command.
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// Model family; overrides `model`.
    #[arg(long, global = true, value_enum)]
    model: Option<ModelArg>,
    /// Dataset directory for fit and evaluate; overrides `data`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Em,
    Vb,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Lgss,
    Stochvol,
    Hawkes,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset from the generative model.
    Simulate,
    /// Optimise the variational bound.
    Fit {
        /// Trainer state to continue from (e.g. a checkpoint).
        #[arg(long, alias = "state")]
        resume: Option<PathBuf>,
    },
    /// Score parameters on a dataset.
    Evaluate {
        #[arg(value_enum)]
        task: Task,
        /// Trainer state to score; the generating parameters when absent.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Marginal variational density on a grid (`evaluate density-grid`).
    Density {
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Predictive log-likelihood (`evaluate predictive-llh`).
    Predict {
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Next-mark prediction (`evaluate next-mark`).
    HawkesPredict {
        #[arg(long)]
        state: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> String {
        match self {
            Command::Simulate => "simulate".into(),
            Command::Fit { .. } => "fit".into(),
            Command::Evaluate { task, .. } => format!("evaluate {}", task.to_possible_value().expect("named").get_name()),
            Command::Density { .. } => "density".into(),
            Command::Predict { .. } => "predict".into(),
            Command::HawkesPredict { .. } => "hawkes-predict".into(),
        }
    }

    /// The evaluation task and state, for `evaluate` and its aliases.
    fn task(&self) -> Option<(Task, Option<&Path>)> {
        match self {
            Command::Evaluate { task, state } => Some((*task, state.as_deref())),
            Command::Density { state } => Some((Task::DensityGrid, state.as_deref())),
            Command::Predict { state } => Some((Task::PredictiveLlh, state.as_deref())),
            Command::HawkesPredict { state } => Some((Task::NextMark, state.as_deref())),
            Command::Simulate | Command::Fit { .. } => None,
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli.config.as_deref().ok_or_else(|| config_error("--config is required"))?;
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = cli.model {
        cfg.model = match m {
            ModelArg::Lgss => ModelKind::Lgss,
            ModelArg::Stochvol => ModelKind::Stochvol,
            ModelArg::Hawkes => ModelKind::Hawkes,
        };
    }
    if let Some(m) = cli.mode {
        cfg.train.mode = match m {
            ModeArg::Em => Mode::Em,
            ModeArg::Vb => Mode::Vb,
        };
    }
    if let Some(k) = cli.particles {
        if k == 0 {
            return Err(config_error("--particles must be positive"));
        }
        match cli.command {
            Command::Fit { .. } => cfg.train.particles = k,
            _ => {
                cfg.evaluate.k = k;
                cfg.density.particles = k;
            }
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(cli)?;
    let mut out = Outputs::create(&cli.out)?;
    let data_dir = || -> Result<PathBuf> {
        cli.data
            .clone()
            .or_else(|| cfg.data.clone())
            .ok_or_else(|| config_error("a dataset directory is required (--data or `data`)"))
    };
    match &cli.command {
        Command::Simulate => simulate::run(&cfg, cfg.seed, &mut out)?,
        Command::Fit { resume } => fit::run(&cfg, cfg.seed, &data_dir()?, resume.as_deref(), &mut out)?,
        cmd => {
            let (task, state) = cmd.task().expect("evaluation command");
            evaluate::run(&cfg, task, cfg.seed, &data_dir()?, state, &mut out)?
        }
    }
    let manifest = RunManifest {
        command: cli.command.name(),
        config_path: cli.config.clone(),
        seed: cfg.seed,
        version: manifest::version(),
        out_dir: cli.out.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        outputs: out.written.clone(),
    };
    data::write_json(&out.dir.join(MANIFEST_FILE), &manifest)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() || err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else if err.downcast_ref::<NumericFailure>().is_some() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
