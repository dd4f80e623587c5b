//! One full-gradient DBN iteration on a 2-2-2 network, replayed scalar by scalar.

use dbn_core::{
    train_iteration, ActivationKind, AlphaSchedule, BatchMode, EtaSchedule, HyperParams, Lambda,
    Matrix, NetworkArch, OutputHead, Sample, StepRule, Theta, TrainState,
};

const EPS: f64 = 1e-5;
const L2: f64 = 1e-3;
const ETA: f64 = 0.5;
const ALPHA: f64 = 0.3;

#[derive(Clone, Copy)]
struct Params {
    w1: [[f64; 2]; 2],
    w2: [[f64; 2]; 2],
    gamma: [f64; 2],
    beta: [f64; 2],
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn hidden(p: &Params, x: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let pre0 = p.w1[0][0] * x[0] + p.w1[0][1] * x[1];
    let pre1 = p.w1[1][0] * x[0] + p.w1[1][1] * x[1];
    ([pre0, pre1], [relu(pre0), relu(pre1)])
}

/// Loss and gradient of one sample, written out per scalar.
fn sample_trace(p: &Params, mu: [f64; 2], sigma: [f64; 2], x: [f64; 2], c: usize) -> (f64, Params) {
    let (pre, z) = hidden(p, x);
    let s0 = sigma[0] + EPS;
    let s1 = sigma[1] + EPS;
    let y0 = p.gamma[0] * (z[0] - mu[0]) / s0 + p.beta[0];
    let y1 = p.gamma[1] * (z[1] - mu[1]) / s1 + p.beta[1];
    let o0 = p.w2[0][0] * y0 + p.w2[0][1] * y1;
    let o1 = p.w2[1][0] * y0 + p.w2[1][1] * y1;
    let top = o0.max(o1);
    let e0 = (o0 - top).exp();
    let e1 = (o1 - top).exp();
    let p0 = e0 / (e0 + e1);
    let p1 = e1 / (e0 + e1);
    let sq = |m: [[f64; 2]; 2]| {
        m[0][0] * m[0][0] + m[0][1] * m[0][1] + m[1][0] * m[1][0] + m[1][1] * m[1][1]
    };
    let penalty = 0.5 * L2 * (sq(p.w1) + sq(p.w2));
    let data_loss = if c == 0 { -p0.ln() } else { -p1.ln() };

    let d0 = p0 - if c == 0 { 1.0 } else { 0.0 };
    let d1 = p1 - if c == 1 { 1.0 } else { 0.0 };
    let gw2 = [
        [d0 * y0 + L2 * p.w2[0][0], d0 * y1 + L2 * p.w2[0][1]],
        [d1 * y0 + L2 * p.w2[1][0], d1 * y1 + L2 * p.w2[1][1]],
    ];
    let dy0 = d0 * p.w2[0][0] + d1 * p.w2[1][0];
    let dy1 = d0 * p.w2[0][1] + d1 * p.w2[1][1];
    let ggamma = [dy0 * (z[0] - mu[0]) / s0, dy1 * (z[1] - mu[1]) / s1];
    let gbeta = [dy0, dy1];
    let dpre0 = if pre[0] > 0.0 {
        dy0 * p.gamma[0] / s0
    } else {
        0.0
    };
    let dpre1 = if pre[1] > 0.0 {
        dy1 * p.gamma[1] / s1
    } else {
        0.0
    };
    let gw1 = [
        [
            dpre0 * x[0] + L2 * p.w1[0][0],
            dpre0 * x[1] + L2 * p.w1[0][1],
        ],
        [
            dpre1 * x[0] + L2 * p.w1[1][0],
            dpre1 * x[1] + L2 * p.w1[1][1],
        ],
    ];
    (
        data_loss + penalty,
        Params {
            w1: gw1,
            w2: gw2,
            gamma: ggamma,
            beta: gbeta,
        },
    )
}

fn to_theta(p: &Params) -> Theta {
    Theta {
        weights: vec![
            Matrix::from_rows(&[p.w1[0].to_vec(), p.w1[1].to_vec()]).unwrap(),
            Matrix::from_rows(&[p.w2[0].to_vec(), p.w2[1].to_vec()]).unwrap(),
        ],
        gamma: vec![p.gamma.to_vec()],
        beta: vec![p.beta.to_vec()],
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn one_iteration_matches_scalar_trace() {
    let p = Params {
        w1: [[0.8, -0.3], [0.4, 0.9]],
        w2: [[0.5, -0.7], [-0.2, 0.6]],
        gamma: [1.1, 0.9],
        beta: [0.1, -0.2],
    };
    let mu = [0.2, 0.1];
    let sigma = [0.8, 1.2];
    let xs = [[1.0, 0.5], [0.6, 1.4]];
    let cs = [0usize, 1];

    // gradient at (θ⁽¹⁾, λ⁽¹⁾), summed
    let (f_a, g_a) = sample_trace(&p, mu, sigma, xs[0], cs[0]);
    let (f_b, g_b) = sample_trace(&p, mu, sigma, xs[1], cs[1]);
    let step = |v: f64, ga: f64, gb: f64| v - ETA * (ga + gb);
    let mut next = p;
    for j in 0..2 {
        for k in 0..2 {
            next.w1[j][k] = step(p.w1[j][k], g_a.w1[j][k], g_b.w1[j][k]);
            next.w2[j][k] = step(p.w2[j][k], g_a.w2[j][k], g_b.w2[j][k]);
        }
        next.gamma[j] = step(p.gamma[j], g_a.gamma[j], g_b.gamma[j]);
        next.beta[j] = step(p.beta[j], g_a.beta[j], g_b.beta[j]);
    }

    // statistics at θ⁽²⁾, then the α-weighted average
    let (_, za) = hidden(&next, xs[0]);
    let (_, zb) = hidden(&next, xs[1]);
    let mut new_mu = [0.0; 2];
    let mut new_sigma = [0.0; 2];
    for j in 0..2 {
        let m = 0.5 * (za[j] + zb[j]);
        let s = (0.5 * ((za[j] - m).powi(2) + (zb[j] - m).powi(2))).sqrt();
        new_mu[j] = ALPHA * m + (1.0 - ALPHA) * mu[j];
        new_sigma[j] = ALPHA * s + (1.0 - ALPHA) * sigma[j];
    }

    let arch = NetworkArch::new(
        vec![2, 2, 2],
        ActivationKind::Relu,
        OutputHead::LinearLogits,
    )
    .unwrap();
    let lambda = Lambda {
        mu: vec![mu.to_vec()],
        sigma: vec![sigma.to_vec()],
    };
    let mut state = TrainState::new(
        arch,
        to_theta(&p),
        lambda,
        AlphaSchedule::Constant(ALPHA),
        StepRule::Sgd(EtaSchedule::Power { c: ETA, k: 1.0 }),
        BatchMode::FullGradient,
    )
    .unwrap();
    let data: Vec<Sample> = xs
        .iter()
        .zip(cs)
        .map(|(x, c)| Sample::class(x.to_vec(), c))
        .collect();
    let hp = HyperParams {
        eps_b: EPS,
        l2_coeff: L2,
    };
    let record = train_iteration(&mut state, &data, &hp).unwrap();

    assert_eq!(record.m, 1);
    assert_eq!(record.eta, Some(ETA));
    assert_eq!(record.alpha, ALPHA);
    assert!(close(record.objective, f_a + f_b));
    assert_eq!(state.iteration(), 2);
    let want = to_theta(&next);
    for (a, b) in state.theta.values().zip(want.values()) {
        assert!(close(*a, *b), "theta {a} vs {b}");
    }
    for j in 0..2 {
        assert!(close(state.lambda.mu[0][j], new_mu[j]));
        assert!(close(state.lambda.sigma[0][j], new_sigma[j]));
    }
}
