//! Diminishing batch normalization (DBN).
//!
//! A batch-normalized feedforward network whose BN statistics `λ = (μ, σ)`
//! are updated by a moving average with weights `α⁽ᵐ⁾` that may shrink over
//! the iterations, trained with diminishing-stepsize gradient descent or
//! AdaGrad. Alongside training the crate provides:
//!
//! - [`schedule_analysis`]: checks whether a pair of power-law `α`/`η`
//!   schedules satisfies the summability conditions under which λ converges
//!   and the gradient norm vanishes, both by rule and by truncated sums.
//! - [`diagnostics`]: finite-difference gradient checks, the Cauchy gap of
//!   the recorded λ sequence, and gradient-norm tracking.
//! - [`experiment`]: datasets (synthetic blobs, IDX files), configuration,
//!   the per-epoch training driver, α sweeps and CSV output.

pub mod csv_out;
pub mod dbn;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optimizer;
pub mod schedule_analysis;
pub mod tensor;

pub use dbn::{alpha_at, batch_statistics, dbn_update, AlphaSchedule, BatchStats};
pub use error::{Error, Result};
pub use model::{
    backward, batch_objective, forward, loss, ActivationKind, Activations, HyperParams, Lambda,
    NetworkArch, OutputHead, Sample, Target, Theta, ThetaGrad,
};
pub use optimizer::{
    adagrad_step, eta_at, sgd_step, train_iteration, AdaGradState, BatchMode, EtaSchedule,
    GradientReduction, StepRule, TrainState,
};
pub use tensor::{matvec, sample_uniform, Matrix, Rng};
