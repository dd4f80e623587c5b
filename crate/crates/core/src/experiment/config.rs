use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer};

use crate::dbn::AlphaSchedule;
use crate::error::{Error, Result};
use crate::model::{ActivationKind, HyperParams, NetworkArch, OutputHead};
use crate::optimizer::{BatchMode, EtaSchedule, GradientReduction};

/// A complete run description, read from TOML. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Metrics CSV for `train`, summary CSV for sweeps.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub training: TrainingSpec,
}

fn default_seed() -> u64 {
    42
}

fn default_epochs() -> usize {
    200
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: default_seed(),
            epochs: default_epochs(),
            output: None,
            dataset: DatasetSpec::default(),
            network: NetworkSpec::default(),
            optimizer: OptimizerSpec::default(),
            training: TrainingSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters whose means sit on a circle of radius 2.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// MNIST-style IDX image and label files.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_classes() -> usize {
    2
}

fn default_dim() -> usize {
    2
}

fn default_samples() -> usize {
    400
}

fn default_spread() -> f64 {
    0.5
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: default_classes(),
            dim: default_dim(),
            samples: default_samples(),
            spread: default_spread(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Hidden layer widths; input and output sizes come from the dataset.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default)]
    pub head: OutputHead,
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}

fn default_activation() -> ActivationKind {
    ActivationKind::Relu
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            hidden: default_hidden(),
            activation: default_activation(),
            head: OutputHead::default(),
        }
    }
}

impl NetworkSpec {
    pub fn arch(&self, input_dim: usize, classes: usize) -> Result<NetworkArch> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend(&self.hidden);
        sizes.push(classes);
        NetworkArch::new(sizes, self.activation, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerSpec {
    /// AdaGrad with base stepsize `eta`.
    Adagrad {
        #[serde(default = "default_adagrad_eta")]
        eta: f64,
    },
    /// Gradient descent with `η⁽ᵐ⁾ = eta / m^power`.
    Sgd {
        eta: f64,
        #[serde(default)]
        power: f64,
    },
}

fn default_adagrad_eta() -> f64 {
    0.01
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adagrad {
            eta: default_adagrad_eta(),
        }
    }
}

impl OptimizerSpec {
    pub fn eta_schedule(&self) -> Option<EtaSchedule> {
        match *self {
            OptimizerSpec::Sgd { eta, power } => Some(EtaSchedule::Power { c: eta, k: power }),
            OptimizerSpec::Adagrad { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSpec {
    FullGradient,
    Minibatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionSpec {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    /// A number in `[0, 1]`, `"1/m"` or `"1/m^h"`.
    #[serde(default = "default_alpha", deserialize_with = "de_alpha")]
    pub alpha: AlphaSchedule,
    #[serde(default = "default_mode")]
    pub mode: ModeSpec,
    /// Capped at the training-set size.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Defaults to `sum` for full-gradient and `mean` for minibatch runs.
    #[serde(default)]
    pub reduction: Option<ReductionSpec>,
    #[serde(default = "default_eps_b")]
    pub eps_b: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Record `‖Σ∇f_i‖₂` over the training set after every epoch.
    #[serde(default = "default_true")]
    pub grad_norm: bool,
}

fn default_alpha() -> AlphaSchedule {
    AlphaSchedule::Constant(1.0)
}

fn default_mode() -> ModeSpec {
    ModeSpec::Minibatch
}

fn default_batch_size() -> usize {
    100
}

fn default_eps_b() -> f64 {
    HyperParams::default().eps_b
}

fn default_l2() -> f64 {
    HyperParams::default().l2_coeff
}

fn default_true() -> bool {
    true
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            alpha: default_alpha(),
            mode: default_mode(),
            batch_size: default_batch_size(),
            reduction: None,
            eps_b: default_eps_b(),
            l2: default_l2(),
            grad_norm: true,
        }
    }
}

impl TrainingSpec {
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            eps_b: self.eps_b,
            l2_coeff: self.l2,
        }
    }

    /// Batch mode for a training set of `n` samples.
    pub fn batch_mode(&self, n: usize) -> BatchMode {
        match self.mode {
            ModeSpec::FullGradient => BatchMode::FullGradient,
            ModeSpec::Minibatch => BatchMode::Minibatch(self.batch_size.min(n.max(1))),
        }
    }

    pub fn gradient_reduction(&self, mode: BatchMode) -> GradientReduction {
        match self.reduction {
            Some(ReductionSpec::Sum) => GradientReduction::Sum,
            Some(ReductionSpec::Mean) => GradientReduction::Mean,
            None => mode.default_reduction(),
        }
    }
}

fn de_alpha<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<AlphaSchedule, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(f64),
        Text(String),
    }
    let schedule = match Raw::deserialize(d)? {
        Raw::Number(a) => AlphaSchedule::Constant(a),
        Raw::Text(s) => s.parse().map_err(serde::de::Error::custom)?,
    };
    schedule.validate().map_err(serde::de::Error::custom)?;
    Ok(schedule)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                samples,
                spread,
            } => {
                if *classes < 2 {
                    return Err(Error::Config("dataset.classes must be ≥ 2".into()));
                }
                if *dim < 2 {
                    return Err(Error::Config("dataset.dim must be ≥ 2".into()));
                }
                if samples < classes {
                    return Err(Error::Config(
                        "dataset.samples must be ≥ dataset.classes".into(),
                    ));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::Config(
                        "dataset.spread must be finite and ≥ 0".into(),
                    ));
                }
            }
            DatasetSpec::Idx { images, labels, .. } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("no such file: {}", p.display())));
                    }
                }
            }
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::Config(
                "network.hidden needs at least one nonzero width".into(),
            ));
        }
        match self.optimizer {
            OptimizerSpec::Adagrad { eta } if !(eta > 0.0 && eta.is_finite()) => {
                return Err(Error::Config("optimizer.eta must be > 0".into()))
            }
            OptimizerSpec::Sgd { .. } => self
                .optimizer
                .eta_schedule()
                .unwrap()
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?,
            _ => {}
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be ≥ 1".into()));
        }
        self.training
            .hyper_params()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}
