//! Batch statistics and the diminishing moving-average update of [`Lambda`].
//!
//! At iteration `m` the BN statistics become
//!
//! ```text
//! λ⁽ᵐ⁺¹⁾ = α⁽ᵐ⁺¹⁾ · stats(θ⁽ᵐ⁺¹⁾) + (1 − α⁽ᵐ⁺¹⁾) · λ⁽ᵐ⁾
//! ```
//!
//! With `α ≡ 1` this is ordinary batch normalization; with `α ≡ 0` the
//! statistics are frozen at their initial value.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{HyperParams, Lambda, NetworkArch, Sample, Theta};

/// Rule producing the averaging weight `α⁽ᵐ⁾`, `m ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaSchedule {
    Constant(f64),
    /// `α⁽ᵐ⁾ = 1 / m^h`.
    Power {
        h: f64,
    },
    /// `α⁽ᵐ⁾ = table[m − 1]`; the last entry repeats past the end.
    Table(Vec<f64>),
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |a: f64| (0.0..=1.0).contains(&a);
        match self {
            AlphaSchedule::Constant(c) if !in_unit(*c) => {
                Err(Error::param(format!("constant alpha {c} outside [0, 1]")))
            }
            AlphaSchedule::Power { h } if !(h.is_finite() && *h >= 0.0) => Err(Error::param(
                format!("alpha exponent h must be finite and ≥ 0, got {h}"),
            )),
            AlphaSchedule::Table(t) if t.is_empty() => Err(Error::param("empty alpha table")),
            AlphaSchedule::Table(t) if !t.iter().all(|&a| in_unit(a)) => {
                Err(Error::param("alpha table entries must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Exponent `h` for power schedules.
    pub fn exponent(&self) -> Option<f64> {
        match self {
            AlphaSchedule::Power { h } => Some(*h),
            _ => None,
        }
    }

    /// True when `α⁽ᵐ⁾ = 0` for every `m`.
    pub fn is_identically_zero(&self) -> bool {
        match self {
            AlphaSchedule::Constant(c) => *c == 0.0,
            AlphaSchedule::Power { .. } => false,
            AlphaSchedule::Table(t) => t.iter().all(|&a| a == 0.0),
        }
    }
}

impl fmt::Display for AlphaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaSchedule::Constant(c) => write!(f, "{c}"),
            AlphaSchedule::Power { h } if *h == 1.0 => write!(f, "1/m"),
            AlphaSchedule::Power { h } => write!(f, "1/m^{h}"),
            AlphaSchedule::Table(t) => {
                let parts: Vec<String> = t.iter().map(f64::to_string).collect();
                write!(f, "table[{}]", parts.join(" "))
            }
        }
    }
}

/// Parses `0.25`, `1/m`, or `1/m^2.5`.
impl FromStr for AlphaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let schedule = if let Some(rest) = s.strip_prefix("1/m") {
            let h = match rest.strip_prefix('^') {
                Some(exp) => exp
                    .parse::<f64>()
                    .map_err(|_| Error::param(format!("bad alpha exponent in {s:?}")))?,
                None if rest.is_empty() => 1.0,
                None => return Err(Error::param(format!("bad alpha schedule {s:?}"))),
            };
            AlphaSchedule::Power { h }
        } else {
            AlphaSchedule::Constant(
                s.parse::<f64>()
                    .map_err(|_| Error::param(format!("bad alpha schedule {s:?}")))?,
            )
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// `α⁽ᵐ⁾`; iterations are 1-based.
pub fn alpha_at(schedule: &AlphaSchedule, m: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::param("iteration index m must be ≥ 1"));
    }
    let value = match schedule {
        AlphaSchedule::Constant(c) => *c,
        AlphaSchedule::Power { h } => (m as f64).powf(-h),
        AlphaSchedule::Table(t) => {
            let idx = usize::try_from(m - 1)
                .unwrap_or(usize::MAX)
                .min(t.len() - 1);
            t[idx]
        }
    };
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::param(format!("alpha({m}) = {value} outside [0, 1]")));
    }
    Ok(value)
}

/// Per-hidden-neuron batch mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

impl BatchStats {
    /// The statistics as a [`Lambda`] (what `α = 1` installs).
    pub fn to_lambda(&self) -> Lambda {
        Lambda {
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
        }
    }
}

/// Mean and population (divisor `N`) standard deviation of every hidden
/// layer's post-activation `z` over `batch`, under the current `theta`.
///
/// Deeper layers see inputs normalized with the batch statistics of the
/// layers below, so the result does not depend on any stored [`Lambda`].
pub fn batch_statistics(
    batch: &[Sample],
    theta: &Theta,
    arch: &NetworkArch,
    hp: &HyperParams,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::param("batch statistics over an empty batch"));
    }
    hp.validate()?;
    theta.check_arch(arch)?;
    let n = batch.len() as f64;
    let act = arch.activation();
    let mut inputs: Vec<Vec<f64>> = batch.iter().map(|s| s.x.clone()).collect();
    if let Some(bad) = inputs.iter().find(|x| x.len() != arch.input_dim()) {
        return Err(Error::Dimension {
            context: "batch statistics input",
            expected: arch.input_dim(),
            got: bad.len(),
        });
    }

    let mut mu_all = Vec::new();
    let mut sigma_all = Vec::new();
    for (l, &width) in arch.hidden_sizes().iter().enumerate() {
        let z: Vec<Vec<f64>> = inputs
            .iter()
            .map(|u| {
                theta.weights[l]
                    .matvec(u)
                    .map(|pre| pre.into_iter().map(|p| act.apply(p)).collect())
            })
            .collect::<Result<_>>()?;
        // Shifted by the first sample so a constant column yields σ = 0 exactly.
        let shift = z[0].clone();
        let mut mu = vec![0.0; width];
        for zi in &z {
            for ((m, v), s) in mu.iter_mut().zip(zi).zip(&shift) {
                *m += v - s;
            }
        }
        for (m, s) in mu.iter_mut().zip(&shift) {
            *m = s + *m / n;
        }
        let mut var = vec![0.0; width];
        for zi in &z {
            for ((s, v), m) in var.iter_mut().zip(zi).zip(&mu) {
                *s += (v - m) * (v - m);
            }
        }
        let sigma: Vec<f64> = var.into_iter().map(|s| (s / n).sqrt()).collect();
        if !mu.iter().chain(&sigma).all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "batch statistics of hidden layer {}",
                l + 1
            )));
        }

        let (gamma, beta) = (&theta.gamma[l], &theta.beta[l]);
        inputs = z
            .into_iter()
            .map(|zi| {
                (0..width)
                    .map(|j| gamma[j] * (zi[j] - mu[j]) / (sigma[j] + hp.eps_b) + beta[j])
                    .collect()
            })
            .collect();
        mu_all.push(mu);
        sigma_all.push(sigma);
    }
    Ok(BatchStats {
        mu: mu_all,
        sigma: sigma_all,
    })
}

/// Componentwise `α · stats + (1 − α) · λ`.
pub fn dbn_update(lambda: &Lambda, stats: &BatchStats, alpha: f64) -> Result<Lambda> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("alpha {alpha} outside [0, 1]")));
    }
    let shapes_match = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
    };
    if !shapes_match(&lambda.mu, &stats.mu) || !shapes_match(&lambda.sigma, &stats.sigma) {
        return Err(Error::param("batch statistics do not match lambda shapes"));
    }
    let blend = |old: &[Vec<f64>], new: &[Vec<f64>]| -> Vec<Vec<f64>> {
        old.iter()
            .zip(new)
            .map(|(o, n)| {
                o.iter()
                    .zip(n)
                    .map(|(&o, &n)| convex(o, n, alpha))
                    .collect()
            })
            .collect()
    };
    Ok(Lambda {
        mu: blend(&lambda.mu, &stats.mu),
        sigma: blend(&lambda.sigma, &stats.sigma),
    })
}

// Exact at the endpoints so α = 1 installs the statistics bit-for-bit
// and α = 0 leaves λ untouched.
#[inline]
fn convex(old: f64, new: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        new
    } else if alpha == 0.0 {
        old
    } else {
        alpha * new + (1.0 - alpha) * old
    }
}
