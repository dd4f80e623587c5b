//! Summability conditions on `(α, η)` schedule pairs.
//!
//! λ converges when
//!
//! ```text
//! S1 = Σ_m α⁽ᵐ⁾ < ∞            S2 = Σ_m Σ_{n≤m} α⁽ᵐ⁾ η⁽ⁿ⁾ < ∞
//! ```
//!
//! and the stationarity result additionally needs
//!
//! ```text
//! S3 = Σ_m Σ_{i≥m} Σ_{n≤i} α⁽ⁱ⁾ η⁽ⁿ⁾ < ∞    S4 = Σ_m Σ_{n≥m} α⁽ⁿ⁾ < ∞
//! ```
//!
//! For `α⁽ᵐ⁾ = 1/m^h`, `η⁽ᵐ⁾ = c/m^k` these reduce to `h > 1, k ≥ 1` and
//! `h > 2, k ≥ 1`. The rules are authoritative; the truncated sums are a
//! heuristic cross-check (see [`classify`]).

use std::fmt;
use std::io::Write;

use crate::csv_out::{format_float, SCHEMA_HEADER};
use crate::dbn::{alpha_at, AlphaSchedule};
use crate::error::{Error, Result};
use crate::optimizer::{eta_at, EtaSchedule};

/// Relative growth `(S(2M) − S(M)) / S(M)` below which a sum counts as convergent.
pub const GROWTH_THRESHOLD: f64 = 0.01;

/// Growth within this factor of [`GROWTH_THRESHOLD`] is reported as inconclusive.
pub const AMBIGUITY_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePair {
    pub alpha: AlphaSchedule,
    pub eta: EtaSchedule,
}

impl SchedulePair {
    /// `α⁽ᵐ⁾ = 1/m^h`, `η⁽ᵐ⁾ = 1/m^k`.
    pub fn power(h: f64, k: f64) -> Result<Self> {
        let pair = SchedulePair {
            alpha: AlphaSchedule::Power { h },
            eta: EtaSchedule::Power { c: 1.0, k },
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        self.eta.validate()
    }

    /// `(h, k)` when both schedules are power laws.
    pub fn exponents(&self) -> Option<(f64, f64)> {
        Some((self.alpha.exponent()?, self.eta.exponent()?))
    }
}

/// Sufficient and necessary for λ to converge with power schedules.
pub fn check_theorem31_rule(h: f64, k: f64) -> bool {
    h > 1.0 && k >= 1.0
}

/// Sufficient and necessary for the vanishing-gradient result with power schedules.
pub fn check_lemma42_rule(h: f64, k: f64) -> bool {
    h > 2.0 && k >= 1.0
}

/// Truncations of the four condition series at `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialSums {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

impl PartialSums {
    pub fn as_array(&self) -> [f64; 4] {
        [self.s1, self.s2, self.s3, self.s4]
    }
}

fn schedule_values(pair: &SchedulePair, horizon: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    pair.validate()?;
    let n = usize::try_from(horizon).map_err(|_| Error::param("truncation too large"))?;
    let mut alpha = Vec::with_capacity(n);
    let mut eta = Vec::with_capacity(n);
    for m in 1..=horizon {
        alpha.push(alpha_at(&pair.alpha, m)?);
        eta.push(eta_at(&pair.eta, m)?);
    }
    Ok((alpha, eta))
}

/// `S1..S4` truncated at `M`, in `O(M)`.
///
/// `E_m = Σ_{n≤m} η⁽ⁿ⁾` is carried forward so `S2 = Σ α⁽ᵐ⁾ E_m`; the tails
/// `Σ_{i=m}^{M} α⁽ⁱ⁾ E_i` and `Σ_{n=m}^{M} α⁽ⁿ⁾` are accumulated backwards
/// and summed into `S3` and `S4`. Overflow shows up as `+∞`.
pub fn partial_sums(pair: &SchedulePair, truncation: u64) -> Result<PartialSums> {
    if truncation == 0 {
        return Err(Error::param("truncation M must be ≥ 1"));
    }
    let (alpha, eta) = schedule_values(pair, truncation)?;
    Ok(sums_from_values(&alpha, &eta))
}

fn sums_from_values(alpha: &[f64], eta: &[f64]) -> PartialSums {
    let mut prefix_eta = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut weighted = Vec::with_capacity(alpha.len());
    for (&a, &e) in alpha.iter().zip(eta) {
        prefix_eta += e;
        s1 += a;
        let w = a * prefix_eta;
        s2 += w;
        weighted.push(w);
    }
    let mut tail_weighted = 0.0;
    let mut tail_alpha = 0.0;
    let mut s3 = 0.0;
    let mut s4 = 0.0;
    for (&w, &a) in weighted.iter().zip(alpha).rev() {
        tail_weighted += w;
        tail_alpha += a;
        s3 += tail_weighted;
        s4 += tail_alpha;
    }
    PartialSums { s1, s2, s3, s4 }
}

/// Truncated `a_m = M1 Σ_{i=m}^{H} Σ_{j≤i} α⁽ⁱ⁾η⁽ʲ⁾ + M2 Σ_{i=m}^{H} α⁽ⁱ⁾` with `H = horizon`.
pub fn tail_bound_am(pair: &SchedulePair, m: u64, m1: f64, m2: f64, horizon: u64) -> Result<f64> {
    Ok(tail_bounds_am(pair, &[m], m1, m2, horizon)?[0])
}

/// [`tail_bound_am`] for several start indices with a single pass over the horizon.
pub fn tail_bounds_am(
    pair: &SchedulePair,
    starts: &[u64],
    m1: f64,
    m2: f64,
    horizon: u64,
) -> Result<Vec<f64>> {
    if !(m1 >= 0.0 && m2 >= 0.0) {
        return Err(Error::param("bound constants M1, M2 must be ≥ 0"));
    }
    if let Some(&bad) = starts.iter().find(|&&m| m == 0 || horizon <= m) {
        return Err(Error::param(format!(
            "need 1 ≤ m < horizon, got m = {bad}, horizon = {horizon}"
        )));
    }
    let (alpha, eta) = schedule_values(pair, horizon)?;
    let mut prefix_eta = 0.0;
    let weighted: Vec<f64> = alpha
        .iter()
        .zip(&eta)
        .map(|(&a, &e)| {
            prefix_eta += e;
            a * prefix_eta
        })
        .collect();
    // Tails from the end: tail[i] covers indices i..H (0-based).
    let mut tail_w = vec![0.0; alpha.len() + 1];
    let mut tail_a = vec![0.0; alpha.len() + 1];
    for i in (0..alpha.len()).rev() {
        tail_w[i] = tail_w[i + 1] + weighted[i];
        tail_a[i] = tail_a[i + 1] + alpha[i];
    }
    Ok(starts
        .iter()
        .map(|&m| {
            let i = (m - 1) as usize;
            m1 * tail_w[i] + m2 * tail_a[i]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesVerdict {
    Convergent,
    Divergent,
    Inconclusive,
}

impl SeriesVerdict {
    /// Conjunction: any divergent series sinks the condition; otherwise any
    /// inconclusive one leaves it open.
    pub fn all(verdicts: impl IntoIterator<Item = SeriesVerdict>) -> SeriesVerdict {
        let mut out = SeriesVerdict::Convergent;
        for v in verdicts {
            match v {
                SeriesVerdict::Divergent => return SeriesVerdict::Divergent,
                SeriesVerdict::Inconclusive => out = SeriesVerdict::Inconclusive,
                SeriesVerdict::Convergent => {}
            }
        }
        out
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            SeriesVerdict::Convergent => Some(true),
            SeriesVerdict::Divergent => Some(false),
            SeriesVerdict::Inconclusive => None,
        }
    }
}

impl fmt::Display for SeriesVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeriesVerdict::Convergent => "convergent",
            SeriesVerdict::Divergent => "divergent",
            SeriesVerdict::Inconclusive => "inconclusive at this truncation",
        })
    }
}

/// Tail-growth evidence for one series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesEvidence {
    pub at_m: f64,
    pub at_2m: f64,
    /// `(S(2M) − S(M)) / S(M)`; NaN when `S(M) = 0`.
    pub growth: f64,
    pub verdict: SeriesVerdict,
}

impl SeriesEvidence {
    pub fn from_sums(at_m: f64, at_2m: f64) -> Self {
        let growth = (at_2m - at_m) / at_m;
        let verdict = if !at_m.is_finite() || !at_2m.is_finite() {
            SeriesVerdict::Divergent
        } else if at_m == 0.0 {
            if at_2m == 0.0 {
                SeriesVerdict::Convergent
            } else {
                SeriesVerdict::Inconclusive
            }
        } else if growth < GROWTH_THRESHOLD / AMBIGUITY_FACTOR {
            SeriesVerdict::Convergent
        } else if growth > GROWTH_THRESHOLD * AMBIGUITY_FACTOR {
            SeriesVerdict::Divergent
        } else {
            SeriesVerdict::Inconclusive
        };
        SeriesEvidence {
            at_m,
            at_2m,
            growth,
            verdict,
        }
    }
}

/// Rule verdicts for a schedule pair next to numeric evidence from truncated sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub exponents: Option<(f64, f64)>,
    pub truncation: u64,
    /// `h > 1 ∧ k ≥ 1`; `None` unless both schedules are power laws.
    pub theorem31_ok: Option<bool>,
    pub theorem31_trace: String,
    /// `h > 2 ∧ k ≥ 1`; implies `theorem31_ok`.
    pub lemma42_ok: Option<bool>,
    pub lemma42_trace: String,
    pub sums: PartialSums,
    /// Evidence for `S1..S4`, then `Σ (η⁽ᵐ⁾)²`.
    pub evidence: [SeriesEvidence; 5],
    /// S1, S2 and `Σ η²` all convergent.
    pub numeric_theorem31: SeriesVerdict,
    /// Numeric theorem-3.1 conditions plus S3 and S4 convergent.
    pub numeric_lemma42: SeriesVerdict,
    /// Both numeric verdicts are conclusive and equal the rule verdicts.
    /// `None` when there are no rule verdicts.
    pub agreement: Option<bool>,
}

/// Evaluates the rules (power schedules only) and the tail-growth heuristic
/// at `M` and `2M`. The heuristic is evidence, not proof: series whose
/// terms decay like `1/m^{1+δ}` with tiny `δ` still look divergent at any
/// practical truncation.
pub fn classify(pair: &SchedulePair, truncation: u64) -> Result<ConditionReport> {
    if truncation == 0 {
        return Err(Error::param("truncation M must be ≥ 1"));
    }
    let (alpha, eta) = schedule_values(pair, 2 * truncation)?;
    let n = truncation as usize;
    let at_m = sums_from_values(&alpha[..n], &eta[..n]);
    let at_2m = sums_from_values(&alpha, &eta);
    let eta_sq = |e: &[f64]| e.iter().map(|x| x * x).sum::<f64>();

    let evidence = [
        SeriesEvidence::from_sums(at_m.s1, at_2m.s1),
        SeriesEvidence::from_sums(at_m.s2, at_2m.s2),
        SeriesEvidence::from_sums(at_m.s3, at_2m.s3),
        SeriesEvidence::from_sums(at_m.s4, at_2m.s4),
        SeriesEvidence::from_sums(eta_sq(&eta[..n]), eta_sq(&eta)),
    ];
    let numeric_theorem31 = SeriesVerdict::all([
        evidence[0].verdict,
        evidence[1].verdict,
        evidence[4].verdict,
    ]);
    let numeric_lemma42 =
        SeriesVerdict::all([numeric_theorem31, evidence[2].verdict, evidence[3].verdict]);

    let exponents = pair.exponents();
    let (theorem31_ok, lemma42_ok, theorem31_trace, lemma42_trace) = match exponents {
        Some((h, k)) => {
            let mark = |ok: bool| if ok { "ok" } else { "fails" };
            let k_ok = k >= 1.0;
            (
                Some(check_theorem31_rule(h, k)),
                Some(check_lemma42_rule(h, k)),
                format!("h={h} > 1 {}; k={k} >= 1 {}", mark(h > 1.0), mark(k_ok)),
                format!("h={h} > 2 {}; k={k} >= 1 {}", mark(h > 2.0), mark(k_ok)),
            )
        }
        None => (
            None,
            None,
            "no rule: schedules are not both power laws".to_string(),
            "no rule: schedules are not both power laws".to_string(),
        ),
    };
    let agreement = match (theorem31_ok, lemma42_ok) {
        (Some(t), Some(l)) => {
            Some(numeric_theorem31.as_bool() == Some(t) && numeric_lemma42.as_bool() == Some(l))
        }
        _ => None,
    };

    Ok(ConditionReport {
        exponents,
        truncation,
        theorem31_ok,
        theorem31_trace,
        lemma42_ok,
        lemma42_trace,
        sums: at_m,
        evidence,
        numeric_theorem31,
        numeric_lemma42,
        agreement,
    })
}

/// Parses `h=0.5,1,2;k=1,2` into the two exponent lists.
pub fn parse_grid(spec: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut hs = None;
    let mut ks = None;
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::param(format!("grid part {part:?} lacks '='")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::param(format!("bad grid value {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match key.trim() {
            "h" => hs = Some(values),
            "k" => ks = Some(values),
            other => return Err(Error::param(format!("unknown grid axis {other:?}"))),
        }
    }
    match (hs, ks) {
        (Some(h), Some(k)) if !h.is_empty() && !k.is_empty() => Ok((h, k)),
        _ => Err(Error::param("grid needs both h=... and k=...")),
    }
}

/// Classifies every `(h, k)` power pair, h-major.
pub fn classify_grid(hs: &[f64], ks: &[f64], truncation: u64) -> Result<Vec<ConditionReport>> {
    let mut out = Vec::with_capacity(hs.len() * ks.len());
    for &h in hs {
        for &k in ks {
            out.push(classify(&SchedulePair::power(h, k)?, truncation)?);
        }
    }
    Ok(out)
}

/// CSV with columns `h,k,thm31,lemma42,S1,S2,S3,S4,agreement`; sums at `M`.
pub fn write_verdict_csv<W: Write>(reports: &[ConditionReport], mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "h",
        "k",
        "thm31",
        "lemma42",
        "S1",
        "S2",
        "S3",
        "S4",
        "agreement",
    ])?;
    let opt = |b: Option<bool>| b.map_or_else(String::new, |b| b.to_string());
    for r in reports {
        let (h, k) = r
            .exponents
            .map_or((String::new(), String::new()), |(h, k)| {
                (h.to_string(), k.to_string())
            });
        let mut row = vec![h, k, opt(r.theorem31_ok), opt(r.lemma42_ok)];
        row.extend(r.sums.as_array().iter().map(|&v| format_float(v)));
        row.push(opt(r.agreement));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal nested-loop evaluation of S1..S4; O(M³).
    fn naive_sums(h: f64, k: f64, big_m: usize) -> [f64; 4] {
        let a = |i: usize| (i as f64).powf(-h);
        let e = |i: usize| (i as f64).powf(-k);
        let mut s = [0.0; 4];
        for m in 1..=big_m {
            s[0] += a(m);
            for n in 1..=m {
                s[1] += a(m) * e(n);
            }
            for i in m..=big_m {
                for n in 1..=i {
                    s[2] += a(i) * e(n);
                }
            }
            for n in m..=big_m {
                s[3] += a(n);
            }
        }
        s
    }

    #[test]
    fn rules_on_examples() {
        assert!(check_theorem31_rule(2.001, 1.0));
        assert!(check_theorem31_rule(1.5, 1.0));
        assert!(!check_theorem31_rule(1.0, 1.0));
        assert!(check_lemma42_rule(2.001, 1.0));
        assert!(!check_lemma42_rule(1.5, 1.0));
        assert!(!check_lemma42_rule(3.0, 0.5));
    }

    #[test]
    fn lemma_rule_implies_theorem_rule_on_grid() {
        for h in [0.5, 1.0, 1.5, 2.0, 2.001, 2.5, 3.0] {
            for k in [0.5, 1.0, 2.0] {
                assert!(!check_lemma42_rule(h, k) || check_theorem31_rule(h, k));
            }
        }
    }

    #[test]
    fn zero_alpha_gives_zero_sums() {
        let pair = SchedulePair {
            alpha: AlphaSchedule::Constant(0.0),
            eta: EtaSchedule::Power { c: 1.0, k: 1.0 },
        };
        let s = partial_sums(&pair, 500).unwrap();
        assert_eq!(s.as_array(), [0.0; 4]);
        assert_eq!(tail_bound_am(&pair, 3, 1.0, 1.0, 100).unwrap(), 0.0);
    }

    #[test]
    fn basel_partial_sum() {
        let s = partial_sums(&SchedulePair::power(2.0, 1.0).unwrap(), 1000).unwrap();
        let direct: f64 = (1..=1000).map(|m| 1.0 / (m as f64 * m as f64)).sum();
        assert!((s.s1 - direct).abs() < 1e-13);
        assert!((s.s1 - 1.6439).abs() < 1e-3);
    }

    #[test]
    fn harmonic_partial_sum_grows() {
        let pair = SchedulePair::power(1.0, 1.0).unwrap();
        let s10 = partial_sums(&pair, 10).unwrap().s1;
        assert!((s10 - 2.9290).abs() < 1e-4);
        let mut prev = s10;
        for m in [20, 40, 80, 160, 320] {
            let s = partial_sums(&pair, m).unwrap().s1;
            assert!(
                s - prev > 0.6,
                "harmonic doubling increment too small at {m}"
            );
            prev = s;
        }
    }

    #[test]
    fn recurrences_match_nested_loops() {
        for (h, k) in [(2.5, 1.0), (1.5, 0.5), (0.5, 2.0), (3.0, 1.0)] {
            let fast = partial_sums(&SchedulePair::power(h, k).unwrap(), 60)
                .unwrap()
                .as_array();
            let slow = naive_sums(h, k, 60);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() <= 1e-10 * s.abs(), "h={h} k={k}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn sums_nondecreasing_in_truncation() {
        let pair = SchedulePair::power(1.5, 1.0).unwrap();
        let mut prev = [0.0; 4];
        for m in [1, 2, 5, 10, 50, 100] {
            let cur = partial_sums(&pair, m).unwrap().as_array();
            for i in 0..4 {
                assert!(cur[i] >= prev[i]);
            }
            prev = cur;
        }
    }

    #[test]
    fn tail_bound_errors_and_zero_constants() {
        let pair = SchedulePair::power(2.5, 1.0).unwrap();
        assert!(tail_bound_am(&pair, 10, 1.0, 1.0, 10).is_err());
        assert!(tail_bound_am(&pair, 0, 1.0, 1.0, 10).is_err());
        assert!(tail_bound_am(&pair, 2, -1.0, 1.0, 10).is_err());
        assert_eq!(tail_bound_am(&pair, 5, 0.0, 0.0, 100).unwrap(), 0.0);
    }

    #[test]
    fn tail_bound_matches_direct_sum() {
        let pair = SchedulePair::power(2.5, 1.0).unwrap();
        let h = 300u64;
        let m = 7u64;
        let mut direct = 0.0;
        for i in m..=h {
            let a = (i as f64).powf(-2.5);
            let e: f64 = (1..=i).map(|j| 1.0 / j as f64).sum();
            direct += 2.0 * a * e + 3.0 * a;
        }
        let got = tail_bound_am(&pair, m, 2.0, 3.0, h).unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn tail_bound_decreases() {
        let pair = SchedulePair::power(2.5, 1.0).unwrap();
        let v = tail_bounds_am(&pair, &[10, 100], 1.0, 1.0, 1_000_000).unwrap();
        assert!(v[1] < v[0]);
    }

    #[test]
    fn evidence_edge_cases() {
        assert_eq!(
            SeriesEvidence::from_sums(0.0, 0.0).verdict,
            SeriesVerdict::Convergent
        );
        assert_eq!(
            SeriesEvidence::from_sums(0.0, 1.0).verdict,
            SeriesVerdict::Inconclusive
        );
        assert_eq!(
            SeriesEvidence::from_sums(1.0, f64::INFINITY).verdict,
            SeriesVerdict::Divergent
        );
        assert_eq!(
            SeriesEvidence::from_sums(1.0, 1.001).verdict,
            SeriesVerdict::Convergent
        );
        assert_eq!(
            SeriesEvidence::from_sums(1.0, 1.01).verdict,
            SeriesVerdict::Inconclusive
        );
        assert_eq!(
            SeriesEvidence::from_sums(1.0, 1.5).verdict,
            SeriesVerdict::Divergent
        );
    }

    #[test]
    fn classify_examples() {
        let r = classify(&SchedulePair::power(2.001, 1.0).unwrap(), 1000).unwrap();
        assert_eq!((r.theorem31_ok, r.lemma42_ok), (Some(true), Some(true)));
        let r = classify(&SchedulePair::power(0.5, 1.0).unwrap(), 1000).unwrap();
        assert_eq!((r.theorem31_ok, r.lemma42_ok), (Some(false), Some(false)));
        assert_eq!(r.numeric_theorem31, SeriesVerdict::Divergent);
        let r = classify(&SchedulePair::power(2.5, 1.0).unwrap(), 100_000).unwrap();
        assert_eq!(r.agreement, Some(true), "{r:?}");
    }

    #[test]
    fn classify_without_rules() {
        let pair = SchedulePair {
            alpha: AlphaSchedule::Constant(0.0),
            eta: EtaSchedule::Power { c: 1.0, k: 1.0 },
        };
        let r = classify(&pair, 100).unwrap();
        assert_eq!(r.agreement, None);
        assert_eq!(r.theorem31_ok, None);
        assert_eq!(r.evidence[0].verdict, SeriesVerdict::Convergent);
    }

    #[test]
    fn grid_parsing() {
        let (h, k) = parse_grid("h=0.5,1, 2.001; k=1,2").unwrap();
        assert_eq!(h, vec![0.5, 1.0, 2.001]);
        assert_eq!(k, vec![1.0, 2.0]);
        assert!(parse_grid("h=1").is_err());
        assert!(parse_grid("h=1;k=x").is_err());
        assert!(parse_grid("h=1;q=2").is_err());
    }

    #[test]
    fn verdict_csv_layout() {
        let reports = classify_grid(&[2.5], &[1.0], 100).unwrap();
        let mut buf = Vec::new();
        write_verdict_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# dbn-lab metrics v1");
        assert_eq!(
            lines.next().unwrap(),
            "h,k,thm31,lemma42,S1,S2,S3,S4,agreement"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&row[..4], &["2.5", "1", "true", "true"]);
        assert_eq!(row.len(), 9);
    }
}
