use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use crate::csv_out::{format_float, format_opt, write_atomic, SCHEMA_HEADER};
use crate::dbn::AlphaSchedule;
use crate::diagnostics::gradient_norm;
use crate::error::{Error, Result};
use crate::model::{
    forward, loss, predict_class, HyperParams, Lambda, NetworkArch, Sample, Target, Theta,
};
use crate::optimizer::{train_iteration, AdaGradState, BatchMode, StepRule, TrainState};
use crate::tensor::Rng;

use super::config::{DatasetSpec, ExperimentConfig, OptimizerSpec};
use super::data::{generate_synthetic, load_idx, Dataset};

/// Stream ids under the run seed.
const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Training iterations completed so far.
    pub iterations: u64,
    /// Mean per-sample loss, regularizer included.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// `‖Σ_i ∇f_i(θ, λ)‖₂` over the training set.
    pub grad_norm: Option<f64>,
    /// `‖λ − λ_prev‖∞` against the previous epoch.
    pub lambda_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub epoch: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub alpha: AlphaSchedule,
    /// Epoch 0 holds the metrics before any update.
    pub rows: Vec<EpochMetrics>,
    pub diverged: Option<Divergence>,
}

impl RunMetrics {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.val_acc).reduce(f64::max)
    }

    pub fn best_train_acc(&self) -> f64 {
        self.rows.iter().map(|r| r.train_acc).fold(0.0, f64::max)
    }

    pub fn last(&self) -> &EpochMetrics {
        self.rows.last().expect("a run always has its initial row")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SCHEMA_HEADER}")?;
        writeln!(out, "# seed={} alpha={}", self.seed, self.alpha)?;
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record([
                "epoch",
                "iterations",
                "train_loss",
                "train_acc",
                "val_loss",
                "val_acc",
                "grad_norm",
                "lambda_gap",
            ])?;
            for r in &self.rows {
                w.write_record([
                    r.epoch.to_string(),
                    r.iterations.to_string(),
                    format_float(r.train_loss),
                    format_float(r.train_acc),
                    format_opt(r.val_loss),
                    format_opt(r.val_acc),
                    format_opt(r.grad_norm),
                    format_opt(r.lambda_gap),
                ])?;
            }
            w.flush()?;
        }
        if let Some(d) = &self.diverged {
            let msg = d.message.replace(['\n', '\r'], " ");
            writeln!(out, "# diverged at epoch {}: {msg}", d.epoch)?;
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetSpec::Synthetic {
            classes,
            dim,
            samples,
            spread,
        } => generate_synthetic(
            *classes,
            *dim,
            *samples,
            *spread,
            &mut Rng::new(config.seed).stream(DATA_STREAM),
        ),
        DatasetSpec::Idx {
            images,
            labels,
            limit,
        } => load_idx(images, labels, *limit),
    }
}

/// Training state at iteration 1 for `config` on `data`.
pub fn initial_state(config: &ExperimentConfig, data: &Dataset) -> Result<TrainState> {
    let arch = config.network.arch(data.input_dim, data.classes)?;
    let theta = Theta::init(&arch, &mut Rng::new(config.seed).stream(INIT_STREAM))?;
    let step_rule = match &config.optimizer {
        OptimizerSpec::Adagrad { eta } => StepRule::AdaGrad(AdaGradState::new(&theta, *eta)),
        OptimizerSpec::Sgd { .. } => StepRule::Sgd(config.optimizer.eta_schedule().unwrap()),
    };
    let mode = config.training.batch_mode(data.train.len());
    let mut state = TrainState::new(
        arch.clone(),
        theta,
        Lambda::initial(&arch),
        config.training.alpha.clone(),
        step_rule,
        mode,
    )?;
    state.reduction = config.training.gradient_reduction(mode);
    Ok(state)
}

/// Mean loss and accuracy of the network on `data`.
pub fn evaluate(
    data: &[Sample],
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::param("evaluation over an empty dataset"));
    }
    let (mut total, mut correct) = (0.0, 0usize);
    for s in data {
        let acts = forward(&s.x, theta, lambda, arch, hp)?;
        total += loss(&acts.output, &s.target, theta, hp)?;
        if let Target::Class(c) = s.target {
            correct += usize::from(predict_class(&acts.output) == c);
        }
    }
    let n = data.len() as f64;
    let mean = total / n;
    if !mean.is_finite() {
        return Err(Error::numeric("evaluation loss"));
    }
    Ok((mean, correct as f64 / n))
}

fn epoch_metrics(
    epoch: usize,
    state: &TrainState,
    previous: Option<&Lambda>,
    data: &Dataset,
    config: &ExperimentConfig,
) -> Result<EpochMetrics> {
    let hp = config.training.hyper_params();
    let (train_loss, train_acc) =
        evaluate(&data.train, &state.theta, &state.lambda, &state.arch, &hp)?;
    let (val_loss, val_acc) = if data.validation.is_empty() {
        (None, None)
    } else {
        let (l, a) = evaluate(
            &data.validation,
            &state.theta,
            &state.lambda,
            &state.arch,
            &hp,
        )?;
        (Some(l), Some(a))
    };
    let grad_norm = if config.training.grad_norm {
        let g = gradient_norm(&state.theta, &state.lambda, &data.train, &state.arch, &hp)?;
        if !g.is_finite() {
            return Err(Error::numeric("gradient norm"));
        }
        Some(g)
    } else {
        None
    };
    Ok(EpochMetrics {
        epoch,
        iterations: state.iteration() - 1,
        train_loss,
        train_acc,
        val_loss,
        val_acc,
        grad_norm,
        lambda_gap: previous.map(|p| state.lambda.distance_inf(p)),
    })
}

fn run_epoch(
    state: &mut TrainState,
    order: &mut [usize],
    rng: &mut Rng,
    data: &Dataset,
    hp: &HyperParams,
) -> Result<()> {
    match state.mode {
        BatchMode::FullGradient => {
            train_iteration(state, &data.train, hp)?;
        }
        BatchMode::Minibatch(size) => {
            rng.shuffle(order);
            let mut batch = Vec::with_capacity(size);
            for chunk in order.chunks(size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| data.train[i].clone()));
                train_iteration(state, &batch, hp)?;
            }
        }
    }
    Ok(())
}

/// Trains on an already loaded dataset. `observe` sees every epoch's
/// metrics together with the state they were computed from.
///
/// Numeric failure ends the run early and is recorded in
/// [`RunMetrics::diverged`]; other errors are returned.
pub fn run_on_dataset(
    config: &ExperimentConfig,
    data: &Dataset,
    observe: &mut dyn FnMut(&EpochMetrics, &TrainState),
) -> Result<RunMetrics> {
    if data.train.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let hp = config.training.hyper_params();
    let mut state = initial_state(config, data)?;
    let mut metrics = RunMetrics {
        seed: config.seed,
        alpha: config.training.alpha.clone(),
        rows: Vec::with_capacity(config.epochs + 1),
        diverged: None,
    };
    let first = epoch_metrics(0, &state, None, data, config)?;
    observe(&first, &state);
    metrics.rows.push(first);

    let mut rng = Rng::new(config.seed).stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=config.epochs {
        let previous = state.lambda.clone();
        let outcome = run_epoch(&mut state, &mut order, &mut rng, data, &hp)
            .and_then(|()| epoch_metrics(epoch, &state, Some(&previous), data, config));
        match outcome {
            Ok(row) => {
                observe(&row, &state);
                metrics.rows.push(row);
            }
            Err(e) if e.is_numeric() => {
                metrics.diverged = Some(Divergence {
                    epoch,
                    message: e.to_string(),
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(metrics)
}

/// Loads the dataset, trains, and writes the metrics CSV to
/// `config.output` if set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunMetrics> {
    config.validate()?;
    let data = load_dataset(config)?;
    let metrics = run_on_dataset(config, &data, &mut |_, _| {})?;
    if let Some(path) = &config.output {
        write_atomic(path, &metrics.to_csv_bytes()?)?;
    }
    Ok(metrics)
}

/// One row per α value, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub runs: Vec<RunMetrics>,
}

impl SweepSummary {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SCHEMA_HEADER}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "alpha",
            "best_val_acc",
            "final_train_acc",
            "final_grad_norm",
            "initial_train_loss",
            "diverged",
        ])?;
        for run in &self.runs {
            w.write_record([
                run.alpha.to_string(),
                format_opt(run.best_val_acc()),
                format_float(run.last().train_acc),
                format_opt(run.last().grad_norm),
                format_float(run.rows[0].train_loss),
                run.diverged.is_some().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

/// File-name-safe label, e.g. `1/m^2` becomes `1-over-m-pow-2`.
pub fn alpha_label(alpha: &AlphaSchedule) -> String {
    alpha
        .to_string()
        .replace('/', "-over-")
        .replace('^', "-pow-")
        .replace(
            |c: char| !(c.is_ascii_alphanumeric() || c == '.' || c == '-'),
            "_",
        )
}

/// Per-run CSV path next to the summary file.
pub fn run_csv_path(summary: &Path, alpha: &AlphaSchedule) -> PathBuf {
    let stem = summary
        .file_stem()
        .map_or_else(|| "sweep".into(), |s| s.to_string_lossy().into_owned());
    summary.with_file_name(format!("{stem}_alpha-{}.csv", alpha_label(alpha)))
}

/// Runs `config` once per α, all from the same seed and hence the same θ
/// initialization, in parallel. Divergent runs are recorded, not fatal.
/// With `config.output` set, the summary goes there and each run's metrics
/// to [`run_csv_path`].
pub fn compare_alphas(config: &ExperimentConfig, alphas: &[AlphaSchedule]) -> Result<SweepSummary> {
    if alphas.is_empty() {
        return Err(Error::param("alpha list is empty"));
    }
    config.validate()?;
    for a in alphas {
        a.validate()?;
    }
    let data = load_dataset(config)?;
    let results: Vec<Result<RunMetrics>> = thread::scope(|scope| {
        let handles: Vec<_> = alphas
            .iter()
            .map(|alpha| {
                let mut cfg = config.clone();
                cfg.training.alpha = alpha.clone();
                let data = &data;
                scope.spawn(move || run_on_dataset(&cfg, data, &mut |_, _| {}))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = SweepSummary { runs };
    if let Some(path) = &config.output {
        for run in &summary.runs {
            write_atomic(&run_csv_path(path, &run.alpha), &run.to_csv_bytes()?)?;
        }
        write_atomic(path, &summary.to_csv_bytes()?)?;
    }
    Ok(summary)
}
