use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dbn_core::diagnostics::{random_gradient_check, CheckHead};
use dbn_core::experiment::{compare_alphas, run_experiment, ExperimentConfig, RunMetrics};
use dbn_core::schedule_analysis::{classify_grid, parse_grid, write_verdict_csv};
use dbn_core::{ActivationKind, AlphaSchedule, HyperParams};

#[derive(Parser)]
#[command(
    name = "dbn-lab",
    version,
    about = "Diminishing batch normalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network and write per-epoch metrics as CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV; without it and without `output` in the config, CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per α value from a shared initialization.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated schedules, e.g. `1,0.5,1/m,1/m^2,0`.
        #[arg(long)]
        alphas: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Summary CSV; per-run CSVs are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify power-law α/η schedule pairs and print a verdict table.
    Schedules {
        /// Exponent grid such as `h=0.5,1,2.5;k=1,2`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 100_000)]
        truncation: u64,
    },
    /// Finite-difference check of backpropagation on a random network.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// Layer sizes separated by `-`.
        #[arg(long, default_value = "3-5-5-2")]
        arch: String,
        #[arg(long, value_enum, default_value_t = Activation::Relu)]
        activation: Activation,
        #[arg(long, value_enum, default_value_t = Head::Softmax)]
        head: Head,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Softmax,
    Mse,
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if out.is_some() {
        config.output = out;
    }
    Ok(config)
}

fn describe(metrics: &RunMetrics) -> String {
    let last = metrics.last();
    let mut line = format!(
        "alpha={} epochs={} iterations={} train_loss={:.6} train_acc={:.4}",
        metrics.alpha, last.epoch, last.iterations, last.train_loss, last.train_acc
    );
    if let Some(v) = last.val_acc {
        line.push_str(&format!(" val_acc={v:.4}"));
    }
    if let Some(d) = &metrics.diverged {
        line.push_str(&format!(" diverged_at_epoch={}", d.epoch));
    }
    line
}

fn parse_alphas(list: &str) -> Result<Vec<AlphaSchedule>> {
    let alphas = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<AlphaSchedule>()
                .with_context(|| format!("alpha {s:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if alphas.is_empty() {
        bail!("--alphas is empty");
    }
    Ok(alphas)
}

fn parse_arch(spec: &str) -> Result<Vec<usize>> {
    spec.split('-')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("layer size {s:?}"))
        })
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    let stdout = io::stdout();
    match cli.command {
        Command::Train { config, seed, out } => {
            let config = load_config(&config, seed, out)?;
            let metrics = run_experiment(&config)?;
            match &config.output {
                Some(path) => println!("{} -> {}", describe(&metrics), path.display()),
                None => metrics.write_csv(stdout.lock())?,
            }
            Ok(metrics.diverged.is_none())
        }
        Command::Sweep {
            config,
            alphas,
            seed,
            out,
        } => {
            let alphas = parse_alphas(&alphas)?;
            let config = load_config(&config, seed, out)?;
            let summary = compare_alphas(&config, &alphas)?;
            summary.write_csv(stdout.lock())?;
            Ok(true)
        }
        Command::Schedules { grid, truncation } => {
            let (hs, ks) = parse_grid(&grid)?;
            let reports = classify_grid(&hs, &ks, truncation)?;
            write_verdict_csv(&reports, stdout.lock())?;
            Ok(true)
        }
        Command::Gradcheck {
            seed,
            arch,
            activation,
            head,
            step,
            tolerance,
        } => {
            let sizes = parse_arch(&arch)?;
            let activation = match activation {
                Activation::Relu => ActivationKind::Relu,
                Activation::Identity => ActivationKind::Identity,
            };
            let head = match head {
                Head::Softmax => CheckHead::Softmax,
                Head::Mse => CheckHead::Mse,
            };
            let report = random_gradient_check(
                seed,
                &sizes,
                activation,
                head,
                &HyperParams::default(),
                step,
            )?;
            let ok = report.max_rel_error < tolerance;
            writeln!(
                stdout.lock(),
                "seed={seed} arch={arch} components={} max_rel_error={:.3e} worst={} {}",
                report.components,
                report.max_rel_error,
                report.worst_component,
                if ok { "ok" } else { "FAILED" }
            )?;
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
