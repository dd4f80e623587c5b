//! Batch-normalized feedforward network.
//!
//! Every hidden layer computes `z = a(W u)` and normalizes the *post-activation*
//! value with the statistics held in [`Lambda`]:
//!
//! ```text
//! y_j = γ_j (z_j − μ_j) / (σ_j + ε_B) + β_j
//! ```
//!
//! The output layer is `W_L u` (linear logits) or `a(W_L u)` (activated head)
//! and is never normalized. Gradients are taken with respect to [`Theta`] only:
//! μ and σ are constants of the objective, so there is no gradient type for
//! [`Lambda`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sample_uniform, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu { slope: f64 },
    Identity,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ActivationKind::Identity => x,
        }
    }

    /// Derivative, taking the right-hand value (or 0 for ReLU) at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Identity => 1.0,
        }
    }

    /// Constant `k` with `|a(x)| ≤ k |x|`.
    pub fn lipschitz_k(self) -> f64 {
        match self {
            ActivationKind::Relu | ActivationKind::Identity => 1.0,
            ActivationKind::LeakyRelu { slope } => slope.abs().max(1.0),
        }
    }

    /// True when the activation is differentiable everywhere.
    pub fn is_smooth(self) -> bool {
        matches!(self, ActivationKind::Identity)
            || matches!(self, ActivationKind::LeakyRelu { slope } if slope == 1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    /// `W_L u`, fed to softmax cross-entropy.
    #[default]
    LinearLogits,
    /// `a(W_L u)`.
    Activated,
}

/// Layer sizes `[D₀, D₁, …, D_{L−1}, C]` plus activation and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkArch {
    layer_sizes: Vec<usize>,
    activation: ActivationKind,
    output_head: OutputHead,
}

impl NetworkArch {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: ActivationKind,
        output_head: OutputHead,
    ) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::param(format!(
                "need input, at least one hidden layer and output, got sizes {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::param(format!(
                "layer sizes must be ≥ 1, got {layer_sizes:?}"
            )));
        }
        if let ActivationKind::LeakyRelu { slope } = activation {
            if !slope.is_finite() {
                return Err(Error::param("leaky_relu slope must be finite"));
            }
        }
        Ok(NetworkArch {
            layer_sizes,
            activation,
            output_head,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn output_head(&self) -> OutputHead {
        self.output_head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn num_weight_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// Gradient-trained parameters: weight matrices plus per-hidden-neuron γ and β.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub weights: Vec<Matrix>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

/// Gradient of the objective with respect to [`Theta`]; same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrad {
    pub weights: Vec<Matrix>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

macro_rules! param_layout {
    ($t:ty) => {
        impl $t {
            /// All scalars in canonical order: weights layer by layer, then γ, then β.
            pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
                self.weights
                    .iter()
                    .flat_map(|w| w.data().iter())
                    .chain(self.gamma.iter().flatten())
                    .chain(self.beta.iter().flatten())
            }

            pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
                self.weights
                    .iter_mut()
                    .flat_map(|w| w.data_mut().iter_mut())
                    .chain(self.gamma.iter_mut().flatten())
                    .chain(self.beta.iter_mut().flatten())
            }

            pub fn len(&self) -> usize {
                self.weights.iter().map(|w| w.data().len()).sum::<usize>()
                    + self.gamma.iter().map(Vec::len).sum::<usize>()
                    + self.beta.iter().map(Vec::len).sum::<usize>()
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            pub fn is_finite(&self) -> bool {
                self.values().all(|v| v.is_finite())
            }

            /// Human-readable name of the `index`-th scalar in [`Self::values`] order.
            pub fn component_name(&self, index: usize) -> String {
                let mut rest = index;
                for (l, w) in self.weights.iter().enumerate() {
                    if rest < w.data().len() {
                        return format!("W{}[{},{}]", l + 1, rest / w.cols(), rest % w.cols());
                    }
                    rest -= w.data().len();
                }
                for (name, groups) in [("gamma", &self.gamma), ("beta", &self.beta)] {
                    for (l, g) in groups.iter().enumerate() {
                        if rest < g.len() {
                            return format!("{name}{}[{rest}]", l + 1);
                        }
                        rest -= g.len();
                    }
                }
                format!("<out of range {index}>")
            }
        }
    };
}

param_layout!(Theta);
param_layout!(ThetaGrad);

impl Theta {
    /// Uniform weights in `±√(6/(fan_in+fan_out))`, γ = 1, β = 0.
    pub fn init(arch: &NetworkArch, rng: &mut Rng) -> Result<Self> {
        let sizes = arch.layer_sizes();
        let mut weights = Vec::with_capacity(arch.num_weight_layers());
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = sample_uniform(rng, -limit, limit, fan_in * fan_out)?;
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
        }
        let hidden = arch.hidden_sizes();
        Ok(Theta {
            weights,
            gamma: hidden.iter().map(|&d| vec![1.0; d]).collect(),
            beta: hidden.iter().map(|&d| vec![0.0; d]).collect(),
        })
    }

    pub fn check_arch(&self, arch: &NetworkArch) -> Result<()> {
        let sizes = arch.layer_sizes();
        let ok = self.weights.len() == arch.num_weight_layers()
            && self
                .weights
                .iter()
                .zip(sizes.windows(2))
                .all(|(w, p)| w.shape() == (p[1], p[0]))
            && self.gamma.len() == arch.hidden_sizes().len()
            && self.beta.len() == arch.hidden_sizes().len()
            && self
                .gamma
                .iter()
                .zip(&self.beta)
                .zip(arch.hidden_sizes())
                .all(|((g, b), &d)| g.len() == d && b.len() == d);
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!(
                "theta shapes do not match architecture {sizes:?}"
            )))
        }
    }
}

impl ThetaGrad {
    pub fn zeros_like(theta: &Theta) -> Self {
        ThetaGrad {
            weights: theta
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            gamma: theta.gamma.iter().map(|g| vec![0.0; g.len()]).collect(),
            beta: theta.beta.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn matches(&self, theta: &Theta) -> bool {
        self.weights.len() == theta.weights.len()
            && self
                .weights
                .iter()
                .zip(&theta.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self.gamma.len() == theta.gamma.len()
            && self
                .gamma
                .iter()
                .zip(&theta.gamma)
                .all(|(a, b)| a.len() == b.len())
            && self.beta.len() == theta.beta.len()
            && self
                .beta
                .iter()
                .zip(&theta.beta)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn add_assign(&mut self, other: &ThetaGrad) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// BN statistics for every hidden neuron. Updated by moving averages, never by gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Lambda {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl Lambda {
    /// μ = 0, σ = 1 for every hidden neuron.
    pub fn initial(arch: &NetworkArch) -> Self {
        Lambda {
            mu: arch.hidden_sizes().iter().map(|&d| vec![0.0; d]).collect(),
            sigma: arch.hidden_sizes().iter().map(|&d| vec![1.0; d]).collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> + '_ {
        self.mu.iter().flatten().chain(self.sigma.iter().flatten())
    }

    pub fn len(&self) -> usize {
        self.values().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `‖self − other‖∞` over all μ and σ components.
    pub fn distance_inf(&self, other: &Lambda) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_arch(&self, arch: &NetworkArch) -> Result<()> {
        let hidden = arch.hidden_sizes();
        let ok = self.mu.len() == hidden.len()
            && self.sigma.len() == hidden.len()
            && self
                .mu
                .iter()
                .zip(&self.sigma)
                .zip(hidden)
                .all(|((m, s), &d)| m.len() == d && s.len() == d);
        if !ok {
            return Err(Error::param("lambda shapes do not match hidden layers"));
        }
        if self.sigma.iter().flatten().any(|&s| !(s >= 0.0)) {
            return Err(Error::param("lambda sigma must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Guard added to σ in the BN denominator.
    pub eps_b: f64,
    /// Coefficient of `½ Σ ‖W_l‖²_F`; γ and β are not regularized.
    pub l2_coeff: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eps_b: 1e-5,
            l2_coeff: 1e-4,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_b > 0.0) || !self.eps_b.is_finite() {
            return Err(Error::param(format!(
                "eps_b must be > 0, got {}",
                self.eps_b
            )));
        }
        if !(self.l2_coeff >= 0.0) || !self.l2_coeff.is_finite() {
            return Err(Error::param(format!(
                "l2_coeff must be ≥ 0, got {}",
                self.l2_coeff
            )));
        }
        Ok(())
    }
}

/// Training target: a class index (softmax cross-entropy) or a vector (squared error).
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub target: Target,
}

impl Sample {
    pub fn class(x: Vec<f64>, class: usize) -> Self {
        Sample {
            x,
            target: Target::Class(class),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub input: Vec<f64>,
    /// `W_l u` for every hidden layer.
    pub pre: Vec<Vec<f64>>,
    /// `a(W_l u)` for every hidden layer; the values BN normalizes.
    pub z: Vec<Vec<f64>>,
    /// Normalized output of every hidden layer.
    pub y: Vec<Vec<f64>>,
    /// `W_L u` of the output layer.
    pub logits: Vec<f64>,
    /// Network output: `logits` or `a(logits)` depending on the head.
    pub output: Vec<f64>,
}

fn ensure_finite(values: &[f64], location: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(location()))
    }
}

pub fn forward(
    x: &[f64],
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<Activations> {
    hp.validate()?;
    theta.check_arch(arch)?;
    lambda.check_arch(arch)?;
    if x.len() != arch.input_dim() {
        return Err(Error::Dimension {
            context: "forward input",
            expected: arch.input_dim(),
            got: x.len(),
        });
    }
    forward_unchecked(x, theta, lambda, arch, hp)
}

pub(crate) fn forward_unchecked(
    x: &[f64],
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<Activations> {
    let act = arch.activation();
    let n_hidden = arch.hidden_sizes().len();
    let mut pre_all = Vec::with_capacity(n_hidden);
    let mut z_all = Vec::with_capacity(n_hidden);
    let mut y_all: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);

    for l in 0..n_hidden {
        let u = if l == 0 { x } else { &y_all[l - 1] };
        let pre = theta.weights[l].matvec(u)?;
        let z: Vec<f64> = pre.iter().map(|&p| act.apply(p)).collect();
        ensure_finite(&z, || format!("hidden layer {} activation", l + 1))?;
        let (mu, sigma) = (&lambda.mu[l], &lambda.sigma[l]);
        let (gamma, beta) = (&theta.gamma[l], &theta.beta[l]);
        let y: Vec<f64> = (0..z.len())
            .map(|j| gamma[j] * (z[j] - mu[j]) / (sigma[j] + hp.eps_b) + beta[j])
            .collect();
        ensure_finite(&y, || format!("hidden layer {} normalized output", l + 1))?;
        pre_all.push(pre);
        z_all.push(z);
        y_all.push(y);
    }

    let last = y_all.last().map_or(x, Vec::as_slice);
    let logits = theta.weights[n_hidden].matvec(last)?;
    let output = match arch.output_head() {
        OutputHead::LinearLogits => logits.clone(),
        OutputHead::Activated => logits.iter().map(|&v| act.apply(v)).collect(),
    };
    ensure_finite(&output, || "output layer".to_string())?;

    Ok(Activations {
        input: x.to_vec(),
        pre: pre_all,
        z: z_all,
        y: y_all,
        logits,
        output,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Data term of the loss and its gradient with respect to the network output.
fn data_loss_and_grad(outputs: &[f64], target: &Target) -> Result<(f64, Vec<f64>)> {
    match target {
        Target::Class(c) => {
            if *c >= outputs.len() {
                return Err(Error::param(format!(
                    "target class {c} out of range for {} outputs",
                    outputs.len()
                )));
            }
            let lse = log_sum_exp(outputs);
            let grad = outputs
                .iter()
                .enumerate()
                .map(|(i, &o)| (o - lse).exp() - if i == *c { 1.0 } else { 0.0 })
                .collect();
            Ok((lse - outputs[*c], grad))
        }
        Target::Values(t) => {
            if t.len() != outputs.len() {
                return Err(Error::Dimension {
                    context: "loss target",
                    expected: outputs.len(),
                    got: t.len(),
                });
            }
            let diff: Vec<f64> = outputs.iter().zip(t).map(|(o, t)| o - t).collect();
            let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
            Ok((loss, diff))
        }
    }
}

fn l2_penalty(theta: &Theta, hp: &HyperParams) -> f64 {
    if hp.l2_coeff == 0.0 {
        return 0.0;
    }
    hp.l2_coeff * 0.5 * theta.weights.iter().map(Matrix::frobenius_sq).sum::<f64>()
}

/// Per-sample loss: softmax cross-entropy for a class target, `½‖o − t‖²` for a
/// vector target, plus `l2_coeff · ½ Σ ‖W_l‖²_F`.
pub fn loss(outputs: &[f64], target: &Target, theta: &Theta, hp: &HyperParams) -> Result<f64> {
    let (data, _) = data_loss_and_grad(outputs, target)?;
    Ok(data + l2_penalty(theta, hp))
}

/// Loss and `∇_θ` loss for one sample.
pub fn loss_and_grad(
    sample: &Sample,
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<(f64, ThetaGrad)> {
    let acts = forward(&sample.x, theta, lambda, arch, hp)?;
    let (data, d_out) = data_loss_and_grad(&acts.output, &sample.target)?;
    let grad = backprop(&acts, d_out, theta, lambda, arch, hp)?;
    Ok((data + l2_penalty(theta, hp), grad))
}

pub fn backward(
    x: &[f64],
    target: &Target,
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<ThetaGrad> {
    let acts = forward(x, theta, lambda, arch, hp)?;
    let (_, d_out) = data_loss_and_grad(&acts.output, target)?;
    backprop(&acts, d_out, theta, lambda, arch, hp)
}

fn backprop(
    acts: &Activations,
    d_out: Vec<f64>,
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<ThetaGrad> {
    let act = arch.activation();
    let n_hidden = arch.hidden_sizes().len();
    let mut grad = ThetaGrad::zeros_like(theta);

    let mut delta = match arch.output_head() {
        OutputHead::LinearLogits => d_out,
        OutputHead::Activated => d_out
            .iter()
            .zip(&acts.logits)
            .map(|(d, &v)| d * act.derivative(v))
            .collect(),
    };

    for l in (0..=n_hidden).rev() {
        let u = if l == 0 { &acts.input } else { &acts.y[l - 1] };
        grad.weights[l].add_outer(1.0, &delta, u);
        if l == 0 {
            break;
        }
        // Back through layer l's input, which is hidden layer h = l - 1's BN output.
        let h = l - 1;
        let d_y = theta.weights[l].transpose_matvec(&delta)?;
        let (mu, sigma) = (&lambda.mu[h], &lambda.sigma[h]);
        let gamma = &theta.gamma[h];
        let mut d_pre = Vec::with_capacity(d_y.len());
        for j in 0..d_y.len() {
            let inv = 1.0 / (sigma[j] + hp.eps_b);
            grad.beta[h][j] = d_y[j];
            grad.gamma[h][j] = d_y[j] * (acts.z[h][j] - mu[j]) * inv;
            d_pre.push(d_y[j] * gamma[j] * inv * act.derivative(acts.pre[h][j]));
        }
        delta = d_pre;
    }

    if hp.l2_coeff != 0.0 {
        for (g, w) in grad.weights.iter_mut().zip(&theta.weights) {
            for (gv, wv) in g.data_mut().iter_mut().zip(w.data()) {
                *gv += hp.l2_coeff * wv;
            }
        }
    }
    if !grad.is_finite() {
        return Err(Error::numeric("backward pass gradient"));
    }
    Ok(grad)
}

/// `Σ_i f_i` and `Σ_i ∇f_i` over `data`, accumulated in dataset order.
pub fn batch_objective(
    data: &[Sample],
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<(f64, ThetaGrad)> {
    if data.is_empty() {
        return Err(Error::param("batch objective over an empty dataset"));
    }
    let mut total = 0.0;
    let mut grad = ThetaGrad::zeros_like(theta);
    for sample in data {
        let (f, g) = loss_and_grad(sample, theta, lambda, arch, hp)?;
        total += f;
        grad.add_assign(&g);
    }
    Ok((total, grad))
}

/// `Σ_i f_i` only.
pub fn batch_loss(
    data: &[Sample],
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("batch loss over an empty dataset"));
    }
    let mut total = 0.0;
    for sample in data {
        let acts = forward(&sample.x, theta, lambda, arch, hp)?;
        total += loss(&acts.output, &sample.target, theta, hp)?;
    }
    Ok(total)
}

/// Index of the largest output (first on ties).
pub fn predict_class(outputs: &[f64]) -> usize {
    outputs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
