//! θ-update rules and the DBN training iteration.

use std::fmt;

use crate::dbn::{alpha_at, batch_statistics, dbn_update, AlphaSchedule, BatchStats};
use crate::error::{Error, Result};
use crate::model::{batch_objective, HyperParams, Lambda, NetworkArch, Sample, Theta, ThetaGrad};

/// Stepsize rule `η⁽ᵐ⁾`, `m ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSchedule {
    Constant(f64),
    /// `η⁽ᵐ⁾ = c / m^k`.
    Power {
        c: f64,
        k: f64,
    },
}

impl EtaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EtaSchedule::Constant(c) | EtaSchedule::Power { c, .. }
                if !(c > 0.0 && c.is_finite()) =>
            {
                Err(Error::param(format!("stepsize base must be > 0, got {c}")))
            }
            EtaSchedule::Power { k, .. } if !(k >= 0.0 && k.is_finite()) => Err(Error::param(
                format!("stepsize exponent must be finite and ≥ 0, got {k}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn exponent(&self) -> Option<f64> {
        match *self {
            EtaSchedule::Power { k, .. } => Some(k),
            EtaSchedule::Constant(_) => None,
        }
    }

    /// Departures from `Σ η = ∞, Σ η² < ∞`. Advisory only; training still runs.
    pub fn diminishing_warnings(&self) -> Vec<StepsizeWarning> {
        let k = match *self {
            EtaSchedule::Constant(_) => 0.0,
            EtaSchedule::Power { k, .. } => k,
        };
        let mut out = Vec::new();
        if k <= 0.5 {
            out.push(StepsizeWarning::SquaresNotSummable { k });
        }
        if k > 1.0 {
            out.push(StepsizeWarning::StepsSummable { k });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepsizeWarning {
    /// `k ≤ 0.5`: `Σ (η⁽ᵐ⁾)²` diverges.
    SquaresNotSummable { k: f64 },
    /// `k > 1`: `Σ η⁽ᵐ⁾` converges, so θ can only travel a bounded distance.
    StepsSummable { k: f64 },
}

impl fmt::Display for StepsizeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepsizeWarning::SquaresNotSummable { k } => {
                write!(
                    f,
                    "stepsize exponent k = {k} ≤ 0.5: sum of squared stepsizes diverges"
                )
            }
            StepsizeWarning::StepsSummable { k } => {
                write!(
                    f,
                    "stepsize exponent k = {k} > 1: sum of stepsizes converges"
                )
            }
        }
    }
}

pub fn eta_at(schedule: &EtaSchedule, m: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::param("iteration index m must be ≥ 1"));
    }
    Ok(match *schedule {
        EtaSchedule::Constant(c) => c,
        EtaSchedule::Power { c, k } => c / (m as f64).powf(k),
    })
}

fn check_grad(theta: &Theta, grad: &ThetaGrad) -> Result<()> {
    if !grad.matches(theta) {
        return Err(Error::param("gradient layout does not match theta"));
    }
    if !grad.is_finite() {
        return Err(Error::numeric("gradient passed to the optimizer"));
    }
    Ok(())
}

/// `θ − η · grad`.
pub fn sgd_step(theta: &Theta, grad: &ThetaGrad, eta: f64) -> Result<Theta> {
    check_grad(theta, grad)?;
    let mut next = theta.clone();
    for (t, g) in next.values_mut().zip(grad.values()) {
        *t -= eta * g;
    }
    if !next.is_finite() {
        return Err(Error::numeric("theta after gradient step"));
    }
    Ok(next)
}

/// Per-component squared-gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaGradState {
    pub accum: ThetaGrad,
    pub base_eta: f64,
    pub eps: f64,
}

impl AdaGradState {
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(theta: &Theta, base_eta: f64) -> Self {
        AdaGradState {
            accum: ThetaGrad::zeros_like(theta),
            base_eta,
            eps: Self::DEFAULT_EPS,
        }
    }

    fn apply(&mut self, theta: &mut Theta, grad: &ThetaGrad) {
        for ((t, a), &g) in theta
            .values_mut()
            .zip(self.accum.values_mut())
            .zip(grad.values())
        {
            *a += g * g;
            *t -= self.base_eta * g / (a.sqrt() + self.eps);
        }
    }
}

/// `acc += g²; θ −= base_eta · g / (√acc + eps)`.
pub fn adagrad_step(
    state: &AdaGradState,
    theta: &Theta,
    grad: &ThetaGrad,
) -> Result<(Theta, AdaGradState)> {
    check_grad(theta, grad)?;
    if !state.accum.matches(theta) {
        return Err(Error::param("adagrad accumulators do not match theta"));
    }
    let mut next_state = state.clone();
    let mut next = theta.clone();
    next_state.apply(&mut next, grad);
    if !next.is_finite() {
        return Err(Error::numeric("theta after adagrad step"));
    }
    Ok((next, next_state))
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepRule {
    Sgd(EtaSchedule),
    AdaGrad(AdaGradState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Every iteration sees the whole training set.
    FullGradient,
    /// Iterations see minibatches of at most this many samples.
    Minibatch(usize),
}

/// How per-sample gradients are combined before the θ step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientReduction {
    /// `Σ_i ∇f_i`, the literal full-gradient update.
    Sum,
    /// `(1/N) Σ_i ∇f_i`, which keeps AdaGrad scales independent of batch size.
    Mean,
}

impl BatchMode {
    pub fn default_reduction(self) -> GradientReduction {
        match self {
            BatchMode::FullGradient => GradientReduction::Sum,
            BatchMode::Minibatch(_) => GradientReduction::Mean,
        }
    }
}

/// Everything the training loop mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: Theta,
    pub lambda: Lambda,
    m: u64,
    pub step_rule: StepRule,
    pub alpha: AlphaSchedule,
    pub mode: BatchMode,
    pub reduction: GradientReduction,
    pub arch: NetworkArch,
}

impl TrainState {
    pub fn new(
        arch: NetworkArch,
        theta: Theta,
        lambda: Lambda,
        alpha: AlphaSchedule,
        step_rule: StepRule,
        mode: BatchMode,
    ) -> Result<Self> {
        theta.check_arch(&arch)?;
        lambda.check_arch(&arch)?;
        alpha.validate()?;
        match &step_rule {
            StepRule::Sgd(eta) => eta.validate()?,
            StepRule::AdaGrad(state) => {
                if !state.accum.matches(&theta) {
                    return Err(Error::param("adagrad accumulators do not match theta"));
                }
                if !(state.base_eta > 0.0) {
                    return Err(Error::param("adagrad base stepsize must be > 0"));
                }
            }
        }
        if let BatchMode::Minibatch(0) = mode {
            return Err(Error::param("minibatch size must be ≥ 1"));
        }
        Ok(TrainState {
            theta,
            lambda,
            m: 1,
            step_rule,
            alpha,
            reduction: mode.default_reduction(),
            mode,
            arch,
        })
    }

    /// Current iteration index (1-based).
    pub fn iteration(&self) -> u64 {
        self.m
    }
}

/// Observation points inside one training iteration.
pub trait IterationHook {
    /// Gradient evaluated at `(θ⁽ᵐ⁾, λ⁽ᵐ⁾)`, before any update.
    fn gradient_evaluated(&mut self, _m: u64, _theta: &Theta, _lambda: &Lambda, _grad: &ThetaGrad) {
    }
    /// Batch statistics computed from the updated `θ⁽ᵐ⁺¹⁾`.
    fn statistics_computed(&mut self, _m: u64, _theta: &Theta, _stats: &BatchStats) {}
    /// `λ⁽ᵐ⁺¹⁾` formed with weight `α⁽ᵐ⁺¹⁾`.
    fn lambda_updated(&mut self, _m: u64, _alpha: f64, _lambda: &Lambda) {}
}

impl IterationHook for () {}

/// Summary of one completed iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// Index of the iteration that ran.
    pub m: u64,
    /// `Σ f_i(θ⁽ᵐ⁾, λ⁽ᵐ⁾)` over the data of this iteration.
    pub objective: f64,
    /// `‖Σ ∇f_i(θ⁽ᵐ⁾, λ⁽ᵐ⁾)‖₂`, independent of the reduction mode.
    pub grad_norm: f64,
    pub eta: Option<f64>,
    pub alpha: f64,
}

pub fn train_iteration(
    state: &mut TrainState,
    data: &[Sample],
    hp: &HyperParams,
) -> Result<IterationRecord> {
    train_iteration_with(state, data, hp, &mut ())
}

/// One DBN iteration: θ step from gradients at `(θ⁽ᵐ⁾, λ⁽ᵐ⁾)`, batch
/// statistics at `θ⁽ᵐ⁺¹⁾`, the `α⁽ᵐ⁺¹⁾` moving average, then `m += 1`.
///
/// On error the state is left untouched.
pub fn train_iteration_with(
    state: &mut TrainState,
    data: &[Sample],
    hp: &HyperParams,
    hook: &mut dyn IterationHook,
) -> Result<IterationRecord> {
    let m = state.m;
    run_iteration(state, data, hp, hook).map_err(|e| e.at_iteration(m))
}

fn run_iteration(
    state: &mut TrainState,
    data: &[Sample],
    hp: &HyperParams,
    hook: &mut dyn IterationHook,
) -> Result<IterationRecord> {
    if data.is_empty() {
        return Err(Error::param("training iteration over empty data"));
    }
    let m = state.m;
    let (objective, mut grad) =
        batch_objective(data, &state.theta, &state.lambda, &state.arch, hp)?;
    hook.gradient_evaluated(m, &state.theta, &state.lambda, &grad);
    let grad_norm = grad.norm_l2();
    if state.reduction == GradientReduction::Mean {
        grad.scale(1.0 / data.len() as f64);
    }

    let (theta, step_rule, eta) = match &state.step_rule {
        StepRule::Sgd(schedule) => {
            let eta = eta_at(schedule, m)?;
            (
                sgd_step(&state.theta, &grad, eta)?,
                state.step_rule.clone(),
                Some(eta),
            )
        }
        StepRule::AdaGrad(ada) => {
            let (theta, ada) = adagrad_step(ada, &state.theta, &grad)?;
            (theta, StepRule::AdaGrad(ada), None)
        }
    };

    let alpha = alpha_at(&state.alpha, m + 1)?;
    let lambda = if alpha == 0.0 {
        state.lambda.clone()
    } else {
        let stats = batch_statistics(data, &theta, &state.arch, hp)?;
        hook.statistics_computed(m, &theta, &stats);
        dbn_update(&state.lambda, &stats, alpha)?
    };
    hook.lambda_updated(m, alpha, &lambda);

    state.theta = theta;
    state.lambda = lambda;
    state.step_rule = step_rule;
    state.m += 1;
    Ok(IterationRecord {
        m,
        objective,
        grad_norm,
        eta,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActivationKind, OutputHead};
    use crate::tensor::{Matrix, Rng};

    fn scalar_theta(v: f64) -> Theta {
        Theta {
            weights: vec![Matrix::from_vec(1, 1, vec![v]).unwrap()],
            gamma: vec![],
            beta: vec![],
        }
    }

    fn scalar_grad(g: f64) -> ThetaGrad {
        ThetaGrad {
            weights: vec![Matrix::from_vec(1, 1, vec![g]).unwrap()],
            gamma: vec![],
            beta: vec![],
        }
    }

    fn slot(theta: &Theta) -> f64 {
        theta.weights[0].get(0, 0)
    }

    #[test]
    fn eta_values() {
        let s = EtaSchedule::Power { c: 0.01, k: 1.0 };
        assert!((eta_at(&s, 10).unwrap() - 0.001).abs() < 1e-18);
        assert_eq!(
            eta_at(&EtaSchedule::Power { c: 1.0, k: 1.0 }, 1).unwrap(),
            1.0
        );
        assert_eq!(eta_at(&EtaSchedule::Constant(0.01), 777).unwrap(), 0.01);
        assert!(eta_at(&s, 0).is_err());
    }

    #[test]
    fn eta_power_nonincreasing() {
        let s = EtaSchedule::Power { c: 0.5, k: 0.75 };
        let v: Vec<f64> = (1..100).map(|m| eta_at(&s, m).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0] && w[1] > 0.0));
    }

    #[test]
    fn diminishing_warnings_flag_exponents() {
        let w = |k| EtaSchedule::Power { c: 1.0, k }.diminishing_warnings();
        assert_eq!(w(0.5), vec![StepsizeWarning::SquaresNotSummable { k: 0.5 }]);
        assert!(w(0.75).is_empty());
        assert!(w(1.0).is_empty());
        assert_eq!(w(2.0), vec![StepsizeWarning::StepsSummable { k: 2.0 }]);
        assert_eq!(EtaSchedule::Constant(0.1).diminishing_warnings().len(), 1);
    }

    #[test]
    fn sgd_step_cases() {
        let theta = scalar_theta(1.0);
        assert_eq!(sgd_step(&theta, &scalar_grad(0.0), 0.1).unwrap(), theta);
        assert_eq!(sgd_step(&theta, &scalar_grad(2.0), 0.0).unwrap(), theta);
        assert!((slot(&sgd_step(&theta, &scalar_grad(2.0), 0.1).unwrap()) - 0.8).abs() < 1e-15);
        assert!(matches!(
            sgd_step(&theta, &scalar_grad(f64::NAN), 0.1),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn adagrad_zero_grad_is_noop() {
        let theta = scalar_theta(0.3);
        let state = AdaGradState::new(&theta, 0.01);
        let (t, s) = adagrad_step(&state, &theta, &scalar_grad(0.0)).unwrap();
        assert_eq!(t, theta);
        assert_eq!(s, state);
    }

    #[test]
    fn adagrad_first_step_normalizes() {
        let theta = scalar_theta(0.0);
        let mut state = AdaGradState::new(&theta, 0.01);
        state.eps = 0.0;
        for g in [5.0, -0.002, 1e6] {
            let (t, _) = adagrad_step(&state, &theta, &scalar_grad(g)).unwrap();
            assert!((slot(&t) + 0.01 * g.signum()).abs() < 1e-15);
        }
    }

    #[test]
    fn adagrad_two_steps_match_hand_trace() {
        let theta = scalar_theta(0.0);
        let state = AdaGradState::new(&theta, 0.01);
        let (t1, s1) = adagrad_step(&state, &theta, &scalar_grad(3.0)).unwrap();
        let (t2, s2) = adagrad_step(&s1, &t1, &scalar_grad(4.0)).unwrap();
        let x1 = 0.0 - 0.01 * 3.0 / (9f64.sqrt() + 1e-8);
        let x2 = x1 - 0.01 * 4.0 / (25f64.sqrt() + 1e-8);
        assert!((slot(&t2) - x2).abs() < 1e-12);
        assert_eq!(s2.accum.weights[0].get(0, 0), 25.0);
    }

    #[test]
    fn adagrad_accumulators_nondecreasing() {
        let theta = scalar_theta(0.0);
        let mut state = AdaGradState::new(&theta, 0.01);
        let mut t = theta;
        let mut prev = 0.0;
        for g in [1.0, -2.0, 0.0, 0.5] {
            let (nt, ns) = adagrad_step(&state, &t, &scalar_grad(g)).unwrap();
            let acc = ns.accum.weights[0].get(0, 0);
            assert!(acc >= prev);
            prev = acc;
            t = nt;
            state = ns;
        }
    }

    #[test]
    fn sgd_on_quadratic_reaches_small_gradient() {
        // f(x) = ½·a·x², gradient a·x, stepsize 1/m.
        let a = 0.9;
        let mut theta = scalar_theta(1.0);
        let schedule = EtaSchedule::Power { c: 1.0, k: 1.0 };
        let mut reached = None;
        for m in 1..=10_000u64 {
            let g = a * slot(&theta);
            if g.abs() < 1e-3 {
                reached = Some(m);
                break;
            }
            theta = sgd_step(&theta, &scalar_grad(g), eta_at(&schedule, m).unwrap()).unwrap();
        }
        assert!(reached.is_some(), "gradient still {}", a * slot(&theta));
    }

    fn toy_state(alpha: AlphaSchedule, mode: BatchMode) -> (TrainState, Vec<Sample>) {
        let arch = NetworkArch::new(
            vec![2, 4, 2],
            ActivationKind::Relu,
            OutputHead::LinearLogits,
        )
        .unwrap();
        let rng = Rng::new(3);
        let theta = Theta::init(&arch, &mut rng.stream(1)).unwrap();
        let lambda = Lambda::initial(&arch);
        let data = vec![
            Sample::class(vec![1.0, 0.5], 0),
            Sample::class(vec![-0.8, 0.2], 1),
            Sample::class(vec![0.3, -1.1], 0),
            Sample::class(vec![-0.2, 0.9], 1),
        ];
        let state = TrainState::new(
            arch,
            theta,
            lambda,
            alpha,
            StepRule::Sgd(EtaSchedule::Power { c: 0.1, k: 1.0 }),
            mode,
        )
        .unwrap();
        (state, data)
    }

    #[test]
    fn frozen_alpha_keeps_lambda() {
        let (mut state, data) = toy_state(AlphaSchedule::Constant(0.0), BatchMode::FullGradient);
        let initial = state.lambda.clone();
        for _ in 0..20 {
            train_iteration(&mut state, &data, &HyperParams::default()).unwrap();
            assert_eq!(state.lambda, initial);
        }
        assert_eq!(state.iteration(), 21);
    }

    #[test]
    fn unit_alpha_installs_batch_statistics() {
        let hp = HyperParams::default();
        let (mut state, data) = toy_state(AlphaSchedule::Constant(1.0), BatchMode::FullGradient);
        for _ in 0..10 {
            train_iteration(&mut state, &data, &hp).unwrap();
            let stats = batch_statistics(&data, &state.theta, &state.arch, &hp).unwrap();
            assert_eq!(state.lambda, stats.to_lambda());
        }
    }

    #[derive(Default)]
    struct Recorder {
        grad_lambda: Vec<Lambda>,
        grad_theta: Vec<Theta>,
        stats_theta: Vec<Theta>,
    }

    impl IterationHook for Recorder {
        fn gradient_evaluated(&mut self, _m: u64, theta: &Theta, lambda: &Lambda, _g: &ThetaGrad) {
            self.grad_theta.push(theta.clone());
            self.grad_lambda.push(lambda.clone());
        }
        fn statistics_computed(&mut self, _m: u64, theta: &Theta, _s: &BatchStats) {
            self.stats_theta.push(theta.clone());
        }
    }

    #[test]
    fn ordering_of_substeps() {
        let hp = HyperParams::default();
        let (mut state, data) = toy_state(AlphaSchedule::Power { h: 1.0 }, BatchMode::FullGradient);
        for _ in 0..5 {
            let before = state.clone();
            let mut rec = Recorder::default();
            train_iteration_with(&mut state, &data, &hp, &mut rec).unwrap();
            assert_eq!(rec.grad_lambda, vec![before.lambda.clone()]);
            assert_eq!(rec.grad_theta, vec![before.theta.clone()]);
            assert_eq!(rec.stats_theta, vec![state.theta.clone()]);
            assert_ne!(state.theta, before.theta);
        }
    }

    #[test]
    fn failed_iteration_leaves_state_and_reports_index() {
        let hp = HyperParams::default();
        let (mut state, data) = toy_state(AlphaSchedule::Constant(0.5), BatchMode::FullGradient);
        train_iteration(&mut state, &data, &hp).unwrap();
        let snapshot = state.clone();
        let bad = vec![Sample::class(vec![f64::NAN, 0.0], 0)];
        let err = train_iteration(&mut state, &bad, &hp).unwrap_err();
        assert!(matches!(err, Error::AtIteration { iteration: 2, .. }));
        assert!(err.is_numeric());
        assert_eq!(state, snapshot);
    }

    #[test]
    fn mean_reduction_divides_step() {
        let hp = HyperParams::default();
        let (mut sum_state, data) =
            toy_state(AlphaSchedule::Constant(0.0), BatchMode::FullGradient);
        let mut mean_state = sum_state.clone();
        mean_state.reduction = GradientReduction::Mean;
        let start = sum_state.theta.clone();
        train_iteration(&mut sum_state, &data, &hp).unwrap();
        train_iteration(&mut mean_state, &data, &hp).unwrap();
        let n = data.len() as f64;
        for ((s, m), t0) in sum_state
            .theta
            .values()
            .zip(mean_state.theta.values())
            .zip(start.values())
        {
            assert!(((s - t0) - n * (m - t0)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let hp = HyperParams::default();
        let run = || {
            let (mut state, data) =
                toy_state(AlphaSchedule::Power { h: 2.0 }, BatchMode::FullGradient);
            for _ in 0..25 {
                train_iteration(&mut state, &data, &hp).unwrap();
            }
            state
        };
        assert_eq!(run(), run());
    }
}
