//! Fixtures shared by the benchmarks.

use dbn_core::experiment::{
    initial_state, load_dataset, Dataset, ExperimentConfig, ModeSpec, OptimizerSpec,
};
use dbn_core::{ActivationKind, Lambda, NetworkArch, OutputHead, Rng, Sample, Theta, TrainState};

/// A network of the given shape with initial parameters and one input sample.
pub fn network(sizes: &[usize], seed: u64) -> (NetworkArch, Theta, Lambda, Sample) {
    let arch = NetworkArch::new(
        sizes.to_vec(),
        ActivationKind::Relu,
        OutputHead::LinearLogits,
    )
    .expect("valid layer sizes");
    let mut rng = Rng::new(seed);
    let theta = Theta::init(&arch, &mut rng).expect("init");
    let lambda = Lambda::initial(&arch);
    let x = (0..arch.input_dim()).map(|_| rng.next_f64()).collect();
    (arch, theta, lambda, Sample::class(x, 0))
}

/// Default synthetic task and a full-gradient training state on it.
pub fn full_gradient_state() -> (Dataset, TrainState, ExperimentConfig) {
    let mut config = ExperimentConfig::default();
    config.training.mode = ModeSpec::FullGradient;
    config.optimizer = OptimizerSpec::Sgd {
        eta: 0.5,
        power: 1.0,
    };
    let data = load_dataset(&config).expect("synthetic data");
    let state = initial_state(&config, &data).expect("state");
    (data, state, config)
}
