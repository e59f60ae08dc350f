//! `stad-lab`: experiment driver for probability-flow likelihoods with
//! stochastic and learned divergence backends.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stad_core::train::DirectMode;

use crate::commands::Run;
use crate::exit::{CliError, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "stad-lab", version, about = "Probability-flow ODE likelihoods with trace estimators and Stein-distilled divergence heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "STAD_LAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    H1,
    H1PlusB,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Random-matrix benchmark of the trace estimators.
    BenchTrace {
        /// Matrix dimensions (comma separated).
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Matrices per dimension.
        #[arg(long)]
        trials: Option<usize>,
        /// Matrix-vector budgets (comma separated).
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Train a score network by denoising score matching.
    TrainScore,
    /// Train a velocity network by conditional flow matching.
    TrainFlow,
    /// Distill a Stein residual head from the teacher.
    Distill,
    /// Train a head by direct regression onto divergence or residual estimates.
    DirectDistill {
        #[arg(long, value_enum, default_value = "h1")]
        mode: ModeArg,
    },
    /// Per-sample log-likelihoods of test points with one backend.
    Loglik {
        /// exact, hutchinson, hutchpp, xtrace, stad, direct_h1 or direct_h1b.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        n_probes: Option<usize>,
    },
    /// Compare every per-sample likelihood CSV in the output directory against exact.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BenchTrace { .. } => "bench-trace",
            Command::TrainScore => "train-score",
            Command::TrainFlow => "train-flow",
            Command::Distill => "distill",
            Command::DirectDistill { .. } => "direct-distill",
            Command::Loglik { .. } => "loglik",
            Command::Report => "report",
        }
    }

    /// Flags expressed as config overrides so the effective config records them.
    fn overrides(&self) -> Vec<String> {
        let list = |v: &[usize]| format!("[{}]", v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","));
        let mut out = Vec::new();
        match self {
            Command::BenchTrace { dims, budgets, .. } => {
                if let Some(d) = dims {
                    out.push(format!("bench.dims={}", list(d)));
                }
                if let Some(b) = budgets {
                    out.push(format!("bench.budgets={}", list(b)));
                }
            }
            Command::Loglik { backend, n_probes } => {
                if let Some(b) = backend {
                    out.push(format!("likelihood.backend=\"{b}\""));
                }
                if let Some(n) = n_probes {
                    out.push(format!("likelihood.n_probes={n}"));
                }
            }
            _ => {}
        }
        out
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new(ExitKind::Config, format!("thread pool: {e}")))?;
    }
    let mut overrides = cli.common.overrides.clone();
    overrides.extend(cli.command.overrides());
    let mut cfg = config::load(cli.common.config.as_deref(), &overrides)?;
    if let Command::BenchTrace { trials: Some(n), .. } = cli.command {
        cfg.bench.trials = vec![n; cfg.bench.dims.len()];
    } else if cfg.bench.trials.len() != cfg.bench.dims.len() && matches!(cli.command, Command::BenchTrace { .. }) {
        // A dims override without trials keeps the first trial count.
        cfg.bench.trials = vec![cfg.bench.trials.first().copied().unwrap_or(1000); cfg.bench.dims.len()];
    }
    let seed = cli.common.seed.or(cfg.seed).unwrap_or(0);
    let run = Run {
        cfg,
        seed,
        out: cli.common.out,
    };
    run.write_effective_config(cli.command.name())?;
    match cli.command {
        Command::BenchTrace { .. } => commands::bench_trace(&run),
        Command::TrainScore => commands::train_score(&run),
        Command::TrainFlow => commands::train_flow(&run),
        Command::Distill => commands::distill_head(&run),
        Command::DirectDistill { mode } => {
            let mode = match mode {
                ModeArg::H1 => DirectMode::H1,
                ModeArg::H1PlusB => DirectMode::H1PlusB,
            };
            commands::direct_distill(&run, mode)
        }
        Command::Loglik { .. } => commands::loglik(&run),
        Command::Report => commands::report(&run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.code())
        }
    }
}
