//! Empirical checks of gradient correctness and of convergence behavior.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::{
    backward, batch_objective, forward, loss, ActivationKind, HyperParams, Lambda, NetworkArch,
    OutputHead, Sample, Target, Theta,
};
use crate::tensor::{sample_uniform, Rng};

/// Smallest distance to a ReLU kink at which probing is considered safe for `step`.
pub fn kink_margin(step: f64) -> f64 {
    1e-6f64.max(100.0 * step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |g_fd − g_bp| / max(|g_fd|, |g_bp|, 1e-12)`.
    pub max_rel_error: f64,
    pub worst_component: String,
    pub components: usize,
    /// Smallest `|pre-activation|` seen at a non-differentiable activation;
    /// `+∞` for smooth activations.
    pub kink_distance: f64,
}

impl GradCheckReport {
    pub fn near_kink(&self, step: f64) -> bool {
        self.kink_distance < kink_margin(step)
    }
}

fn kink_distance(
    x: &[f64],
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<f64> {
    if arch.activation().is_smooth() {
        return Ok(f64::INFINITY);
    }
    let acts = forward(x, theta, lambda, arch, hp)?;
    let mut points: Vec<f64> = acts.pre.iter().flatten().copied().collect();
    if arch.output_head() == OutputHead::Activated {
        points.extend(&acts.logits);
    }
    Ok(points.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min))
}

/// Central differences `(f(θ+he_i) − f(θ−he_i)) / 2h` for every θ component,
/// with λ held fixed, compared against [`backward`].
pub fn gradient_check(
    theta: &Theta,
    lambda: &Lambda,
    arch: &NetworkArch,
    hp: &HyperParams,
    sample: &Sample,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::param(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let analytic: Vec<f64> = backward(&sample.x, &sample.target, theta, lambda, arch, hp)?
        .values()
        .copied()
        .collect();
    let eval = |t: &Theta| -> Result<f64> {
        let acts = forward(&sample.x, t, lambda, arch, hp)?;
        loss(&acts.output, &sample.target, t, hp)
    };

    let mut probe = theta.clone();
    let mut worst = (0.0, 0usize);
    for i in 0..analytic.len() {
        let original = *probe.values().nth(i).unwrap();
        let set = |p: &mut Theta, v: f64| *p.values_mut().nth(i).unwrap() = v;
        set(&mut probe, original + step);
        let plus = eval(&probe);
        set(&mut probe, original - step);
        let minus = eval(&probe);
        set(&mut probe, original);
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            _ => {
                return Err(Error::numeric(format!(
                    "loss while probing {}",
                    theta.component_name(i)
                )))
            }
        };
        let fd = (plus - minus) / (2.0 * step);
        let bp = analytic[i];
        let rel = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-12);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_component: theta.component_name(worst.1),
        components: analytic.len(),
        kink_distance: kink_distance(&sample.x, theta, lambda, arch, hp)?,
    })
}

/// Loss used by [`random_gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckHead {
    /// Linear logits, softmax cross-entropy on a class target.
    Softmax,
    /// Activated output, squared error on a vector target.
    Mse,
}

/// Draws a random network, λ and probe sample from `seed` and runs
/// [`gradient_check`]. Probe samples too close to an activation kink are
/// redrawn.
pub fn random_gradient_check(
    seed: u64,
    layer_sizes: &[usize],
    activation: ActivationKind,
    head: CheckHead,
    hp: &HyperParams,
    step: f64,
) -> Result<GradCheckReport> {
    let output_head = match head {
        CheckHead::Softmax => OutputHead::LinearLogits,
        CheckHead::Mse => OutputHead::Activated,
    };
    let arch = NetworkArch::new(layer_sizes.to_vec(), activation, output_head)?;
    let root = Rng::new(seed);
    let theta = {
        let mut theta = Theta::init(&arch, &mut root.stream(0))?;
        let mut rng = root.stream(1);
        for g in theta.gamma.iter_mut().flatten() {
            *g = 0.5 + rng.next_f64();
        }
        for b in theta.beta.iter_mut().flatten() {
            *b = rng.next_f64() - 0.5;
        }
        theta
    };
    let mut lambda = Lambda::initial(&arch);
    let mut rng = root.stream(2);
    for m in lambda.mu.iter_mut().flatten() {
        *m = 0.5 * rng.next_f64();
    }
    for s in lambda.sigma.iter_mut().flatten() {
        *s = 0.5 + rng.next_f64();
    }

    let mut rng = root.stream(3);
    for _ in 0..1000 {
        let x = sample_uniform(&mut rng, -1.0, 1.0, arch.input_dim())?;
        if kink_distance(&x, &theta, &lambda, &arch, hp)? < kink_margin(step) {
            continue;
        }
        let target = match head {
            CheckHead::Softmax => Target::Class(rng.index(arch.output_dim())),
            CheckHead::Mse => {
                Target::Values(sample_uniform(&mut rng, -1.0, 1.0, arch.output_dim())?)
            }
        };
        return gradient_check(&theta, &lambda, &arch, hp, &Sample { x, target }, step);
    }
    Err(Error::param(
        "could not draw a probe point away from activation kinks",
    ))
}

/// Bounded record of `(m, λ⁽ᵐ⁾)` snapshots.
///
/// Only iterations divisible by `stride` are kept, and the oldest snapshot
/// is dropped once `capacity` is reached, so gaps computed from a thinned or
/// truncated history are lower bounds of the true supremum.
#[derive(Debug, Clone)]
pub struct LambdaHistory {
    capacity: usize,
    stride: u64,
    entries: VecDeque<(u64, Lambda)>,
    last_offered: Option<u64>,
    evicted: bool,
}

impl LambdaHistory {
    pub fn new(capacity: usize, stride: u64) -> Result<Self> {
        if capacity == 0 || stride == 0 {
            return Err(Error::param("history capacity and stride must be ≥ 1"));
        }
        Ok(LambdaHistory {
            capacity,
            stride,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            last_offered: None,
            evicted: false,
        })
    }

    /// Offers a snapshot; returns whether it was retained.
    pub fn record(&mut self, m: u64, lambda: &Lambda) -> Result<bool> {
        if let Some(last) = self.last_offered {
            if m <= last {
                return Err(Error::param(format!(
                    "history iterations must increase: got {m} after {last}"
                )));
            }
        }
        self.last_offered = Some(m);
        if m % self.stride != 0 {
            return Ok(false);
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
            self.evicted = true;
        }
        self.entries.push_back((m, lambda.clone()));
        Ok(true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Lambda)> + '_ {
        self.entries.iter().map(|(m, l)| (*m, l))
    }

    /// True when snapshots were skipped or dropped.
    pub fn is_lower_bound(&self) -> bool {
        self.stride > 1 || self.evicted
    }
}

/// `max_{p,q ≥ m} ‖λ⁽ᵖ⁾ − λ⁽ᑫ⁾‖∞` over the retained snapshots.
pub fn lambda_gap(history: &LambdaHistory, m: u64) -> Result<f64> {
    let mut tail = history.iter().filter(|(i, _)| *i >= m).map(|(_, l)| l);
    let first = tail
        .next()
        .ok_or_else(|| Error::param(format!("no lambda snapshots at or after iteration {m}")))?;
    let mut lo: Vec<f64> = first.values().copied().collect();
    let mut hi = lo.clone();
    let mut count = 1;
    for lambda in tail {
        count += 1;
        for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(lambda.values()) {
            *l = l.min(v);
            *h = h.max(v);
        }
    }
    if count < 2 {
        return Err(Error::param(format!(
            "need at least two lambda snapshots at or after iteration {m}"
        )));
    }
    Ok(lo.iter().zip(&hi).map(|(l, h)| h - l).fold(0.0, f64::max))
}

/// `‖Σ_i ∇f_i(θ, λ)‖₂`.
pub fn gradient_norm(
    theta: &Theta,
    lambda: &Lambda,
    data: &[Sample],
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(batch_objective(data, theta, lambda, arch, hp)?.1.norm_l2())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub m: u64,
    pub grad_norm: f64,
    pub objective: f64,
    pub lambda_gap: Option<f64>,
}

/// Per-iteration `‖∇f̄‖₂`, `f̄` and λ-gap.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceTrace {
    records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        let finite = record.grad_norm.is_finite()
            && record.objective.is_finite()
            && record.lambda_gap.map_or(true, f64::is_finite);
        if !finite {
            return Err(Error::numeric(format!(
                "convergence trace at iteration {}",
                record.m
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn at(&self, m: u64) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.m == m)
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}
