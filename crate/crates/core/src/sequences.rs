//! Send sequences `p_0, p_1, ...` and the prefix classifiers that decide which
//! instability argument covers a given sequence.
//!
//! Every sequence can report both `p_j` and `log(1/p_j)`. The log form is exact
//! even where `p_j` underflows an `f64` (doubly-exponential decay reaches zero
//! near `j = 11`), and all classifiers work with it.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("{name} = {value} is outside {range}")]
    Parameter {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("splice indices must start at 0 and strictly increase")]
    Splices,
    #[error("explicit prefix entry p_{index} = {value} is outside (0, 1]")]
    Prefix { index: usize, value: f64 },
}

fn check_unit(name: &'static str, v: f64) -> Result<(), SequenceError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(SequenceError::Parameter { name, value: v, range: "(0, 1]" })
    }
}

fn check_open_unit(name: &'static str, v: f64) -> Result<(), SequenceError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(SequenceError::Parameter { name, value: v, range: "(0, 1)" })
    }
}

/// Simple closed-form rules, usable on their own or as the tail of a
/// composite sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum TailRule {
    Constant { c: f64 },
    /// `rho^j`
    Geometric { rho: f64 },
    /// `2^-j`
    BinaryExponential,
    /// `(j + 1)^-alpha`
    Polynomial { alpha: f64 },
    /// `base^(-2^j)`
    DoublyExponential { base: f64 },
    /// `1 / log log j`, capped at 1 where `log log j <= 1`.
    InvLogLog,
}

impl TailRule {
    fn validate(&self) -> Result<(), SequenceError> {
        match *self {
            TailRule::Constant { c } => check_unit("c", c),
            TailRule::Geometric { rho } => check_open_unit("rho", rho),
            TailRule::Polynomial { alpha } => {
                if alpha > 0.0 && alpha.is_finite() {
                    Ok(())
                } else {
                    Err(SequenceError::Parameter { name: "alpha", value: alpha, range: "(0, inf)" })
                }
            }
            TailRule::DoublyExponential { base } => {
                if base > 1.0 && base.is_finite() {
                    Ok(())
                } else {
                    Err(SequenceError::Parameter { name: "base", value: base, range: "(1, inf)" })
                }
            }
            TailRule::BinaryExponential | TailRule::InvLogLog => Ok(()),
        }
    }

    fn ln_inv(&self, j: u64) -> f64 {
        let x = j as f64;
        match *self {
            TailRule::Constant { c } => -c.ln(),
            TailRule::Geometric { rho } => x * -rho.ln(),
            TailRule::BinaryExponential => x * LN_2,
            TailRule::Polynomial { alpha } => alpha * (x + 1.0).ln(),
            TailRule::DoublyExponential { base } => x.exp2() * base.ln(),
            TailRule::InvLogLog => inv_log_log(j).ln().abs(),
        }
    }

    fn eval(&self, j: u64) -> f64 {
        let x = j as f64;
        let v = match *self {
            TailRule::Constant { c } => c,
            TailRule::Geometric { rho } => rho.powf(x),
            TailRule::BinaryExponential => (-x).exp2(),
            TailRule::Polynomial { alpha } => (x + 1.0).powf(-alpha),
            TailRule::DoublyExponential { base } => (-(x.exp2()) * base.log2()).exp2(),
            TailRule::InvLogLog => inv_log_log(j),
        };
        v.max(f64::MIN_POSITIVE)
    }
}

fn inv_log_log(j: u64) -> f64 {
    let ll = (j as f64).ln().ln();
    if ll > 1.0 {
        1.0 / ll
    } else {
        1.0
    }
}

/// Splice points `a_0 = 0 < a_1 < ...` of an interleaved sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Splices {
    Explicit(Vec<u64>),
    /// `a_0 = 0` and `a_k = 2^(2^k)` for `k >= 1`.
    DoublyExponential,
}

impl Splices {
    /// Index `k` of the splice interval `[a_k, a_{k+1})` containing `j`. The
    /// last listed interval extends forever.
    fn interval(&self, j: u64) -> usize {
        match self {
            Splices::Explicit(a) => a.partition_point(|&s| s <= j) - 1,
            Splices::DoublyExponential => {
                let mut k = 0usize;
                // a_1 = 4, a_2 = 16, a_3 = 256, ...; a_6 = 2^64 exceeds u64.
                for e in 1..6u32 {
                    let a = 1u64 << (1u32 << e);
                    if j >= a {
                        k = e as usize;
                    } else {
                        break;
                    }
                }
                k
            }
        }
    }

    fn validate(&self) -> Result<(), SequenceError> {
        match self {
            Splices::Explicit(a) => {
                if a.first() != Some(&0) || a.windows(2).any(|w| w[0] >= w[1]) {
                    Err(SequenceError::Splices)
                } else {
                    Ok(())
                }
            }
            Splices::DoublyExponential => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SequenceRule {
    Constant { c: f64 },
    Geometric { rho: f64 },
    BinaryExponential,
    Polynomial { alpha: f64 },
    DoublyExponential { base: f64 },
    /// `rho^j` on even splice intervals, `g(j)` on odd ones.
    Interleaved { rho: f64, splices: Splices, g: TailRule },
    /// Listed values for `j < prefix.len()`, then the tail rule evaluated at `j`.
    ExplicitPrefix { prefix: Vec<f64>, tail: TailRule },
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    #[serde(flatten)]
    rule: SequenceRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p0: Option<f64>,
}

/// A validated send sequence. Every `p_j` lies in `(0, 1]`; values that would
/// underflow are clamped to `f64::MIN_POSITIVE` by [`eval`](Self::eval) while
/// [`ln_inv`](Self::ln_inv) stays exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence", into = "RawSequence")]
pub struct SendSequence {
    rule: SequenceRule,
    p0: Option<f64>,
}

impl TryFrom<RawSequence> for SendSequence {
    type Error = SequenceError;
    fn try_from(raw: RawSequence) -> Result<Self, Self::Error> {
        let seq = SendSequence::new(raw.rule)?;
        match raw.p0 {
            Some(p0) => seq.with_p0(p0),
            None => Ok(seq),
        }
    }
}

impl From<SendSequence> for RawSequence {
    fn from(s: SendSequence) -> Self {
        RawSequence { rule: s.rule, p0: s.p0 }
    }
}

impl SendSequence {
    pub fn new(rule: SequenceRule) -> Result<Self, SequenceError> {
        match &rule {
            SequenceRule::Constant { c } => check_unit("c", *c)?,
            SequenceRule::Geometric { rho } => check_open_unit("rho", *rho)?,
            SequenceRule::BinaryExponential => {}
            SequenceRule::Polynomial { alpha } => TailRule::Polynomial { alpha: *alpha }.validate()?,
            SequenceRule::DoublyExponential { base } => {
                TailRule::DoublyExponential { base: *base }.validate()?
            }
            SequenceRule::Interleaved { rho, splices, g } => {
                check_open_unit("rho", *rho)?;
                splices.validate()?;
                g.validate()?;
            }
            SequenceRule::ExplicitPrefix { prefix, tail } => {
                if let Some((index, &value)) =
                    prefix.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v <= 1.0))
                {
                    return Err(SequenceError::Prefix { index, value });
                }
                tail.validate()?;
            }
        }
        Ok(Self { rule, p0: None })
    }

    /// Replaces `p_0`.
    pub fn with_p0(mut self, p0: f64) -> Result<Self, SequenceError> {
        check_unit("p0", p0)?;
        self.p0 = Some(p0);
        Ok(self)
    }

    pub fn constant(c: f64) -> Result<Self, SequenceError> {
        Self::new(SequenceRule::Constant { c })
    }

    pub fn geometric(rho: f64) -> Result<Self, SequenceError> {
        Self::new(SequenceRule::Geometric { rho })
    }

    pub fn binary_exponential() -> Self {
        Self { rule: SequenceRule::BinaryExponential, p0: None }
    }

    pub fn polynomial(alpha: f64) -> Result<Self, SequenceError> {
        Self::new(SequenceRule::Polynomial { alpha })
    }

    pub fn doubly_exponential(base: f64) -> Result<Self, SequenceError> {
        Self::new(SequenceRule::DoublyExponential { base })
    }

    pub fn interleaved(rho: f64, splices: Splices, g: TailRule) -> Result<Self, SequenceError> {
        Self::new(SequenceRule::Interleaved { rho, splices, g })
    }

    pub fn explicit(prefix: Vec<f64>, tail: TailRule) -> Result<Self, SequenceError> {
        Self::new(SequenceRule::ExplicitPrefix { prefix, tail })
    }

    pub fn rule(&self) -> &SequenceRule {
        &self.rule
    }

    /// `p_j`.
    pub fn eval(&self, j: u64) -> f64 {
        if j == 0 {
            if let Some(p0) = self.p0 {
                return p0;
            }
        }
        match &self.rule {
            SequenceRule::Constant { c } => TailRule::Constant { c: *c }.eval(j),
            SequenceRule::Geometric { rho } => TailRule::Geometric { rho: *rho }.eval(j),
            SequenceRule::BinaryExponential => TailRule::BinaryExponential.eval(j),
            SequenceRule::Polynomial { alpha } => TailRule::Polynomial { alpha: *alpha }.eval(j),
            SequenceRule::DoublyExponential { base } => {
                TailRule::DoublyExponential { base: *base }.eval(j)
            }
            SequenceRule::Interleaved { rho, splices, g } => {
                if splices.interval(j) % 2 == 0 {
                    TailRule::Geometric { rho: *rho }.eval(j)
                } else {
                    g.eval(j)
                }
            }
            SequenceRule::ExplicitPrefix { prefix, tail } => match prefix.get(j as usize) {
                Some(&v) => v,
                None => tail.eval(j),
            },
        }
    }

    /// `log(1 / p_j)`, exact even where `p_j` underflows (may be `+inf`).
    pub fn ln_inv(&self, j: u64) -> f64 {
        if j == 0 {
            if let Some(p0) = self.p0 {
                return -p0.ln();
            }
        }
        match &self.rule {
            SequenceRule::Constant { c } => TailRule::Constant { c: *c }.ln_inv(j),
            SequenceRule::Geometric { rho } => TailRule::Geometric { rho: *rho }.ln_inv(j),
            SequenceRule::BinaryExponential => TailRule::BinaryExponential.ln_inv(j),
            SequenceRule::Polynomial { alpha } => TailRule::Polynomial { alpha: *alpha }.ln_inv(j),
            SequenceRule::DoublyExponential { base } => {
                TailRule::DoublyExponential { base: *base }.ln_inv(j)
            }
            SequenceRule::Interleaved { rho, splices, g } => {
                if splices.interval(j) % 2 == 0 {
                    TailRule::Geometric { rho: *rho }.ln_inv(j)
                } else {
                    g.ln_inv(j)
                }
            }
            SequenceRule::ExplicitPrefix { prefix, tail } => match prefix.get(j as usize) {
                Some(&v) => -v.ln(),
                None => tail.ln_inv(j),
            },
        }
    }

    /// `sum_{j=lo}^{hi} 1/p_j`. Closed forms where the rule has one; otherwise
    /// explicit summation, refused beyond `max_terms` terms.
    pub fn inverse_sum(&self, lo: u64, hi: u64, max_terms: u64) -> Option<f64> {
        if hi < lo {
            return Some(0.0);
        }
        let closed = if self.p0.is_some() && lo == 0 {
            None
        } else {
            match &self.rule {
                SequenceRule::Constant { c } => Some((hi - lo + 1) as f64 / c),
                SequenceRule::Geometric { rho } => Some(geometric_inverse_sum(*rho, lo, hi)),
                SequenceRule::BinaryExponential => Some(geometric_inverse_sum(0.5, lo, hi)),
                _ => None,
            }
        };
        if closed.is_some() {
            return closed;
        }
        if hi - lo >= max_terms {
            return None;
        }
        Some((lo..=hi).map(|j| self.ln_inv(j).exp()).sum())
    }

    /// The sequence with `p_0 = 1` and the arrival rate `lambda * p_0` whose
    /// backoff process is dominated by the original one.
    pub fn normalize_p0(&self, lambda: f64) -> (SendSequence, f64) {
        let p0 = self.eval(0);
        let mut out = self.clone();
        out.p0 = Some(1.0);
        (out, lambda * p0)
    }

    /// Least `j` with `p_j < 1`, scanning `j <= horizon`.
    pub fn j_min(&self, horizon: u64) -> Option<u64> {
        (0..=horizon).find(|&j| self.eval(j) < 1.0)
    }
}

fn geometric_inverse_sum(rho: f64, lo: u64, hi: u64) -> f64 {
    // sum_{j=lo}^{hi} rho^-j = rho^-lo * (r^(n) - 1) / (r - 1), r = 1/rho
    let r = 1.0 / rho;
    let n = (hi - lo + 1) as f64;
    r.powf(lo as f64) * (r.powf(n) - 1.0) / (r - 1.0)
}

// ---------------------------------------------------------------------------
// Constants shared with the block construction.

/// `ceil(3 / eta)`.
pub fn kappa(eta: f64) -> u64 {
    (3.0 / eta).ceil() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuitabilityConstants {
    pub kappa: u64,
    pub p_star: f64,
}

/// `kappa = ceil(3/eta)` and `p_* = min(lambda/200, lambda eta / (1800 kappa^2 log(1/nu)))`.
pub fn suitability_constants(lambda: f64, eta: f64, nu: f64) -> SuitabilityConstants {
    let kappa = kappa(eta);
    SuitabilityConstants { kappa, p_star: p_star_with_kappa(lambda, eta, nu, kappa) }
}

pub(crate) fn p_star_with_kappa(lambda: f64, eta: f64, nu: f64, kappa: u64) -> f64 {
    let k = kappa as f64;
    (lambda / 200.0).min(lambda * eta / (1800.0 * k * k * (1.0 / nu).ln()))
}

// ---------------------------------------------------------------------------
// Prefix checks.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuitabilityFailure {
    /// `|{j in [n] : p_j <= p_*}| > eta n` fails.
    Fraction,
    /// `nu^n < p_n` fails.
    Decay,
    /// Both conditions fail at `n`.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum SuitabilityOutcome {
    /// Both conditions hold for every `n` in `[n0, horizon]`.
    Suitable { n0: u64 },
    /// The last `n <= horizon` where a condition fails, or the failure at the
    /// horizon when the satisfied suffix is shorter than half the horizon.
    NotSuitableOnPrefix { violating_n: u64, failure: SuitabilityFailure },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuitabilityReport {
    pub lambda: f64,
    pub eta: f64,
    pub nu: f64,
    pub kappa: u64,
    pub p_star: f64,
    pub horizon: u64,
    pub outcome: SuitabilityOutcome,
    /// Always true: nothing beyond the horizon was examined.
    pub finite_prefix: bool,
}

impl SuitabilityReport {
    pub fn is_suitable(&self) -> bool {
        matches!(self.outcome, SuitabilityOutcome::Suitable { .. })
    }
}

/// Scans `n = 1..=horizon` for the two suitability conditions. The sequence is
/// reported suitable when both hold on a suffix `[n0, horizon]` with
/// `n0 <= horizon / 2`.
pub fn check_suitable(seq: &SendSequence, lambda: f64, eta: f64, nu: f64, horizon: u64) -> SuitabilityReport {
    assert!(horizon >= 10, "suitability scan needs horizon >= 10");
    let SuitabilityConstants { kappa, p_star } = suitability_constants(lambda, eta, nu);
    let ln_inv_nu = (1.0 / nu).ln();
    let mut small = 0u64;
    let mut last_bad: Option<(u64, SuitabilityFailure)> = None;
    for n in 1..=horizon {
        if seq.eval(n) <= p_star {
            small += 1;
        }
        let fraction_ok = small as f64 > eta * n as f64;
        let decay_ok = (n as f64) * ln_inv_nu > seq.ln_inv(n);
        let failure = match (fraction_ok, decay_ok) {
            (true, true) => None,
            (false, true) => Some(SuitabilityFailure::Fraction),
            (true, false) => Some(SuitabilityFailure::Decay),
            (false, false) => Some(SuitabilityFailure::Both),
        };
        if let Some(f) = failure {
            last_bad = Some((n, f));
        }
    }
    let outcome = match last_bad {
        None => SuitabilityOutcome::Suitable { n0: 1 },
        Some((n, _)) if n < horizon / 2 => SuitabilityOutcome::Suitable { n0: n + 1 },
        Some((n, failure)) => SuitabilityOutcome::NotSuitableOnPrefix { violating_n: n, failure },
    };
    SuitabilityReport { lambda, eta, nu, kappa, p_star, horizon, outcome, finite_prefix: true }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KillerReport {
    pub lambda: f64,
    pub horizon: u64,
    /// Number of `j` in `1..=horizon` with `p_j <= (lambda p_0 / 2)^j`.
    pub hit_count: u64,
    /// The first (up to 64) hits.
    pub first_hits: Vec<u64>,
    /// Hits in `[horizon/2, horizon]`.
    pub tail_hits: u64,
    pub evidence: bool,
    pub finite_prefix: bool,
}

/// Lists `j >= 1` with `p_j <= (lambda p_0 / 2)^j`. Evidence for infinitely
/// many hits is a nonzero hit count in the second half of the horizon.
pub fn check_killer(seq: &SendSequence, lambda: f64, horizon: u64) -> KillerReport {
    let base = (2.0 / (lambda * seq.eval(0))).ln();
    let tail_from = horizon / 2;
    let mut hit_count = 0;
    let mut tail_hits = 0;
    let mut first_hits = Vec::new();
    for j in 1..=horizon {
        let threshold = j as f64 * base;
        if seq.ln_inv(j) >= threshold * (1.0 - 1e-12) {
            hit_count += 1;
            if first_hits.len() < 64 {
                first_hits.push(j);
            }
            if j >= tail_from {
                tail_hits += 1;
            }
        }
    }
    KillerReport {
        lambda,
        horizon,
        hit_count,
        first_hits,
        tail_hits,
        evidence: tail_hits > 0,
        finite_prefix: true,
    }
}

/// `mu_tau` for every `tau` in `0..=tau_max`: the expected number of sends,
/// up to `tau` steps after birth, of a ball whose waits in bins `0, 1, ...`
/// are independent geometrics with parameters `p_0, p_1, ...`.
///
/// Dynamic programme over the law of the partial sums `S_j = W_0 + ... + W_j`
/// restricted to `1..=tau_max`; mass beyond `tau_max` can never return.
pub fn mu_tau_profile(seq: &SendSequence, tau_max: u64) -> Vec<f64> {
    let n = tau_max as usize;
    let mut acc = vec![0.0f64; n + 1];
    if n == 0 {
        return acc;
    }
    // mass[s] = P(S_j = s), s in 0..=n (index 0 unused).
    let mut mass = vec![0.0f64; n + 1];
    let p0 = seq.eval(0);
    let q0 = 1.0 - p0;
    let mut w = p0;
    for m in mass.iter_mut().skip(1) {
        *m = w;
        w *= q0;
    }
    let mut next = vec![0.0f64; n + 1];
    let mut lowest = 1usize;
    for j in 0..n as u64 {
        // accumulate P(S_j <= tau) into acc[tau]
        let mut cdf = 0.0;
        let mut total = 0.0;
        for tau in lowest..=n {
            cdf += mass[tau];
            acc[tau] += cdf;
            total += mass[tau];
        }
        // remaining contributions are bounded by n * total
        if total * n as f64 <= 1e-16 || j + 1 >= n as u64 {
            break;
        }
        let p = seq.eval(j + 1);
        let q = 1.0 - p;
        next[lowest] = 0.0;
        for s in lowest + 1..=n {
            next[s] = q * next[s - 1] + p * mass[s - 1];
        }
        std::mem::swap(&mut mass, &mut next);
        mass[lowest] = 0.0;
        lowest += 1;
    }
    acc
}

pub fn mu_tau(seq: &SendSequence, tau: u64) -> f64 {
    mu_tau_profile(seq, tau)[tau as usize]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    Converging,
    Diverging,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmSeries {
    pub lambda: f64,
    pub tau_max: u64,
    pub partial_sum: f64,
    /// Log-log slope of the summands over `[tau_max/10, tau_max]`.
    pub tail_slope: f64,
    pub trend: Trend,
}

/// `sum_{tau <= tau_max} mu_tau e^(-lambda mu_tau)` with a convergence trend:
/// converging when the summands decay faster than `tau^-1.1` over the last decade.
pub fn km_partial_sum(seq: &SendSequence, lambda: f64, tau_max: u64) -> KmSeries {
    let mu = mu_tau_profile(seq, tau_max);
    let summands: Vec<f64> = mu.iter().map(|&m| m * (-lambda * m).exp()).collect();
    let partial_sum = summands.iter().sum();
    let lo = (tau_max / 10).max(1);
    let pts: Vec<(f64, f64)> = (lo..=tau_max)
        .filter(|&t| summands[t as usize] > 0.0)
        .map(|t| ((t as f64).ln(), summands[t as usize].ln()))
        .collect();
    let tail_slope = if pts.len() >= 2 {
        least_squares_slope(&pts)
    } else {
        f64::NEG_INFINITY
    };
    let trend = if tail_slope < -1.1 { Trend::Converging } else { Trend::Diverging };
    KmSeries { lambda, tau_max, partial_sum, tail_slope, trend }
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SublinearReport {
    pub horizon: u64,
    /// Slope of `log(1/p_j)` against `j` on `[horizon/4, horizon/2]`.
    pub early_slope: f64,
    /// The same slope on `[horizon/2, horizon]`.
    pub late_slope: f64,
    pub evidence: bool,
}

/// Prefix evidence for `log(1/p_j) = o(j)`: the late slope is flat, or it is
/// below 0.9 times the early slope.
pub fn check_sublinear_decay(seq: &SendSequence, horizon: u64) -> SublinearReport {
    let slope = |lo: u64, hi: u64| -> f64 {
        let pts: Vec<(f64, f64)> = (lo..=hi).map(|j| (j as f64, seq.ln_inv(j))).collect();
        if pts.iter().any(|p| !p.1.is_finite()) {
            return f64::INFINITY;
        }
        least_squares_slope(&pts)
    };
    let early_slope = slope(horizon / 4, horizon / 2);
    let late_slope = slope(horizon / 2, horizon);
    let evidence = if !late_slope.is_finite() {
        false
    } else if late_slope.abs() <= 1e-12 {
        true
    } else {
        early_slope > 0.0 && late_slope < 0.9 * early_slope
    };
    SublinearReport { horizon, early_slope, late_slope, evidence }
}

pub const ETA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestConstant {
    pub eta: f64,
    /// Best `c` over `n` in `[horizon/4, horizon/2]`.
    pub early: f64,
    /// Best `c` over `n` in `[horizon/2, horizon]`.
    pub late: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcedReport {
    pub horizon: u64,
    /// Per-eta best-c curves for the "largely constant" item.
    pub largely_constant: Vec<BestConstant>,
    pub largely_constant_holds: bool,
    /// Largest `log(1/p_j)/j` on the early and late windows.
    pub early_rate: f64,
    pub late_rate: f64,
    pub exponential_decay_holds: bool,
    /// Largest `log(1/p_j)/j` over `j <= horizon/2`.
    pub fitted_rate_bound: f64,
    pub not_super_exponential_holds: bool,
    pub likely: bool,
    pub finite_prefix: bool,
}

/// Prefix proxies for the three LCED items:
/// - largely constant: for each `eta`, the largest `c` with
///   `|{j <= n : p_j > c}| >= (1 - eta) n` for some `n` in a window does not
///   shrink from the early window to the late one;
/// - exponential decay: the largest `log(1/p_j)/j` on the late window is
///   positive and at least 0.9 times that of the early window;
/// - no super-exponential decay: the late rate stays within 1.5 times the
///   largest rate fitted on the first half of the prefix.
pub fn check_lced_prefix(seq: &SendSequence, horizon: u64) -> LcedReport {
    assert!(horizon >= 100, "LCED scan needs horizon >= 100");
    let q = horizon / 4;
    let h = horizon / 2;
    let sample = |lo: u64, hi: u64| -> Vec<u64> {
        let k = 32u64;
        let mut v: Vec<u64> = (0..=k).map(|i| lo + (hi - lo) * i / k).collect();
        v.dedup();
        v
    };
    let ln_inv: Vec<f64> = (0..=horizon).map(|j| seq.ln_inv(j)).collect();
    // best c for eta at n: the ceil((1-eta) n)-th largest p among p_0..p_n,
    // i.e. the matching smallest log(1/p).
    let best_c = |n: u64, sorted: &[f64], eta: f64| -> f64 {
        let k = ((1.0 - eta) * n as f64).ceil().max(1.0) as usize;
        let _ = n;
        (-sorted[k - 1]).exp()
    };
    let mut early = vec![0.0f64; ETA_GRID.len()];
    let mut late = vec![0.0f64; ETA_GRID.len()];
    for (window, out) in [((q, h), &mut early), ((h, horizon), &mut late)] {
        for n in sample(window.0, window.1) {
            let mut sorted: Vec<f64> = ln_inv[..=n as usize].to_vec();
            sorted.sort_by(f64::total_cmp);
            for (i, &eta) in ETA_GRID.iter().enumerate() {
                out[i] = out[i].max(best_c(n, &sorted, eta));
            }
        }
    }
    let largely_constant: Vec<BestConstant> = ETA_GRID
        .iter()
        .enumerate()
        .map(|(i, &eta)| BestConstant {
            eta,
            early: early[i],
            late: late[i],
            holds: late[i] > 0.0 && late[i] >= early[i] * (1.0 - 1e-9),
        })
        .collect();
    let largely_constant_holds = largely_constant.iter().all(|b| b.holds);

    let rate = |lo: u64, hi: u64| -> f64 {
        (lo.max(1)..=hi).map(|j| ln_inv[j as usize] / j as f64).fold(0.0, f64::max)
    };
    let early_rate = rate(q, h);
    let late_rate = rate(h, horizon);
    let exponential_decay_holds =
        late_rate > 0.0 && late_rate.is_finite() && late_rate >= 0.9 * early_rate;
    let fitted_rate_bound = rate(1, h);
    let not_super_exponential_holds = late_rate.is_finite() && late_rate <= 1.5 * fitted_rate_bound;
    LcedReport {
        horizon,
        largely_constant,
        largely_constant_holds,
        early_rate,
        late_rate,
        exponential_decay_holds,
        fitted_rate_bound,
        not_super_exponential_holds,
        likely: largely_constant_holds && exponential_decay_holds && not_super_exponential_holds,
        finite_prefix: true,
    }
}

/// Lower median of `p_0, ..., p_n`.
pub fn median_prefix(seq: &SendSequence, n: u64) -> f64 {
    let mut v: Vec<f64> = (0..=n).map(|j| seq.eval(j)).collect();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

// ---------------------------------------------------------------------------
// Case split.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstabilityCase {
    Killer,
    KellyMacphee,
    Suitable,
    LcedUndecided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub eta: f64,
    pub nu: f64,
    pub n0: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Witness {
    Killer(KillerReport),
    KellyMacphee(SublinearReport),
    /// First certificate in grid order plus every passing grid point.
    Suitable { certificate: Certificate, all: Vec<Certificate> },
    LcedUndecided(LcedReport),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierVerdict {
    pub case: InstabilityCase,
    pub witness: Witness,
    /// Arrival rate after `p_0` normalisation.
    pub normalized_lambda: f64,
    pub horizon: u64,
    pub finite_prefix: bool,
}

impl ClassifierVerdict {
    pub fn certificates(&self) -> &[Certificate] {
        match &self.witness {
            Witness::Suitable { all, .. } => all,
            _ => &[],
        }
    }
}

/// Normalises `p_0`, then tries super-exponential decay, sub-exponential
/// decay, and suitability over the `(eta, nu)` grid, in that order.
pub fn classify(seq: &SendSequence, lambda: f64, horizon: u64) -> ClassifierVerdict {
    let (norm, lam) = seq.normalize_p0(lambda);
    let done = |case, witness| ClassifierVerdict {
        case,
        witness,
        normalized_lambda: lam,
        horizon,
        finite_prefix: true,
    };
    let killer = check_killer(&norm, lam, horizon);
    if killer.evidence {
        return done(InstabilityCase::Killer, Witness::Killer(killer));
    }
    let sub = check_sublinear_decay(&norm, horizon);
    if sub.evidence {
        return done(InstabilityCase::KellyMacphee, Witness::KellyMacphee(sub));
    }
    let mut all = Vec::new();
    for &eta in &ETA_GRID {
        for &nu in &ETA_GRID {
            let r = check_suitable(&norm, lam, eta, nu, horizon);
            if let SuitabilityOutcome::Suitable { n0 } = r.outcome {
                all.push(Certificate { eta, nu, n0 });
            }
        }
    }
    if let Some(certificate) = all.first().cloned() {
        return done(InstabilityCase::Suitable, Witness::Suitable { certificate, all });
    }
    done(InstabilityCase::LcedUndecided, Witness::LcedUndecided(check_lced_prefix(&norm, horizon)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn binary_exponential_values() {
        let s = SendSequence::binary_exponential();
        assert_eq!(s.eval(3), 0.125);
        assert_eq!(s.eval(0), 1.0);
    }

    #[test]
    fn constant_one_is_one_everywhere() {
        let s = SendSequence::constant(1.0).unwrap();
        for j in [0, 1, 17, 1_000_000] {
            assert_eq!(s.eval(j), 1.0);
        }
    }

    #[test]
    fn interleaved_piecewise_rule() {
        let s = SendSequence::interleaved(0.1, Splices::Explicit(vec![0, 2, 4]), TailRule::Constant { c: 0.5 }).unwrap();
        let want = [1.0, 0.1, 0.5, 0.5, 1e-4];
        for (j, w) in want.iter().enumerate() {
            assert!(close(s.eval(j as u64), *w, 1e-12), "j={j}: {}", s.eval(j as u64));
        }
    }

    #[test]
    fn doubly_exponential_splices() {
        let a = Splices::DoublyExponential;
        assert_eq!(a.interval(0), 0);
        assert_eq!(a.interval(3), 0);
        assert_eq!(a.interval(4), 1);
        assert_eq!(a.interval(15), 1);
        assert_eq!(a.interval(16), 2);
        assert_eq!(a.interval(255), 2);
        assert_eq!(a.interval(256), 3);
        assert_eq!(a.interval(65_536), 4);
        assert_eq!(a.interval(u64::MAX), 5);
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(SendSequence::constant(0.0).is_err());
        assert!(SendSequence::constant(1.5).is_err());
        assert!(SendSequence::geometric(1.0).is_err());
        assert!(SendSequence::polynomial(-1.0).is_err());
        assert!(SendSequence::doubly_exponential(1.0).is_err());
        assert!(SendSequence::interleaved(0.5, Splices::Explicit(vec![1, 2]), TailRule::InvLogLog).is_err());
        assert!(SendSequence::interleaved(0.5, Splices::Explicit(vec![0, 2, 2]), TailRule::InvLogLog).is_err());
        assert!(SendSequence::explicit(vec![1.0, 0.0], TailRule::BinaryExponential).is_err());
        assert!(SendSequence::binary_exponential().with_p0(0.0).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = SendSequence::interleaved(0.25, Splices::DoublyExponential, TailRule::InvLogLog)
            .unwrap()
            .with_p0(0.5)
            .unwrap();
        let txt = serde_json::to_string(&s).unwrap();
        let back: SendSequence = serde_json::from_str(&txt).unwrap();
        assert_eq!(s, back);
        let bad = r#"{"kind":"constant","c":2.0}"#;
        assert!(serde_json::from_str::<SendSequence>(bad).is_err());
        let explicit = r#"{"kind":"explicit-prefix","prefix":[1.0,0.3],"tail":{"rule":"polynomial","alpha":2.0}}"#;
        let e: SendSequence = serde_json::from_str(explicit).unwrap();
        assert_eq!(e.eval(1), 0.3);
        assert!(close(e.eval(3), 1.0 / 16.0, 1e-15));
    }

    #[test]
    fn normalize_examples() {
        let (b, l) = SendSequence::binary_exponential().normalize_p0(0.6);
        assert_eq!(b.eval(0), 1.0);
        assert_eq!(b.eval(4), 1.0 / 16.0);
        assert_eq!(l, 0.6);
        let (c, l) = SendSequence::constant(0.5).unwrap().normalize_p0(0.6);
        assert_eq!((c.eval(0), c.eval(1), c.eval(9)), (1.0, 0.5, 0.5));
        assert!(close(l, 0.3, 1e-15));
        let (_, l) = SendSequence::polynomial(2.0).unwrap().normalize_p0(0.8);
        assert_eq!(l, 0.8);
    }

    #[test]
    fn constants_examples() {
        assert_eq!(kappa(0.5), 6);
        assert_eq!(kappa(1.0), 3);
        assert_eq!(kappa(0.999), 4);
        let c = suitability_constants(0.5, 0.5, 0.5);
        let oracle = (0.0025f64).min(0.25 / (64_800.0 * 2f64.ln()));
        assert_eq!(c.kappa, 6);
        assert!(close(c.p_star, oracle, 1e-14));
        assert!(close(c.p_star, 5.566e-6, 1e-3));
    }

    #[test]
    fn suitable_examples() {
        let geo = SendSequence::geometric(0.5).unwrap();
        let r = check_suitable(&geo, 0.5, 0.5, 0.4, 10_000);
        match r.outcome {
            SuitabilityOutcome::Suitable { n0 } => assert!(n0 < 100, "n0 = {n0}"),
            other => panic!("{other:?}"),
        }
        let c = SendSequence::constant(0.9).unwrap().with_p0(1.0).unwrap();
        let r = check_suitable(&c, 0.5, 0.5, 0.5, 1000);
        assert!(matches!(
            r.outcome,
            SuitabilityOutcome::NotSuitableOnPrefix { failure: SuitabilityFailure::Fraction | SuitabilityFailure::Both, .. }
        ));
        let r = check_suitable(&geo, 0.5, 0.5, 0.6, 1000);
        assert!(matches!(
            r.outcome,
            SuitabilityOutcome::NotSuitableOnPrefix { failure: SuitabilityFailure::Decay | SuitabilityFailure::Both, .. }
        ));
    }

    #[test]
    fn beb_suitable_first_n0_is_35() {
        // p_* ~ 5.57e-6 at (0.5, 0.5, 0.4)?  Use the oracle: first j with 2^-j <= p_*.
        let c = suitability_constants(0.5, 0.5, 0.4);
        let jstar = (1..64).find(|&j| 0.5f64.powi(j) <= c.p_star).unwrap() as u64;
        // count over [n] is n - jstar + 1, which exceeds n/2 once n > 2(jstar - 1).
        let expected_n0 = 2 * (jstar - 1) + 1;
        let r = check_suitable(&SendSequence::binary_exponential(), 0.5, 0.5, 0.4, 10_000);
        assert_eq!(r.outcome, SuitabilityOutcome::Suitable { n0: expected_n0 });
    }

    #[test]
    fn killer_examples() {
        let de = SendSequence::doubly_exponential(2.0).unwrap().with_p0(1.0).unwrap();
        let r = check_killer(&de, 0.5, 200);
        assert_eq!(r.hit_count, 200);
        assert!(r.evidence);
        let beb = check_killer(&SendSequence::binary_exponential(), 0.5, 200);
        assert_eq!(beb.hit_count, 0);
        let one = check_killer(&SendSequence::constant(1.0).unwrap(), 0.3, 200);
        assert_eq!(one.hit_count, 0);
        assert!(!one.evidence);
    }

    #[test]
    fn mu_tau_deterministic_waits() {
        let one = SendSequence::constant(1.0).unwrap();
        assert_eq!(mu_tau(&one, 5), 5.0);
        assert_eq!(mu_tau(&one, 0), 0.0);
        assert_eq!(mu_tau(&SendSequence::binary_exponential(), 0), 0.0);
    }

    #[test]
    fn mu_tau_two_bins_by_hand() {
        // p0 = 1, p1 = 1/2, p2 = 1/4: S_0 = 1, S_1 = 1 + Geom(1/2).
        // mu_3 = P(S_0<=3) + P(S_1<=3) + P(S_2<=3)
        //      = 1 + (1/2 + 1/4) + P(W1=1)P(W2=1) = 1 + 0.75 + 0.125
        let beb = SendSequence::binary_exponential();
        assert!(close(mu_tau(&beb, 3), 1.875, 1e-14));
    }

    #[test]
    fn km_all_ones_closed_form() {
        let one = SendSequence::constant(1.0).unwrap();
        let n = 200u64;
        let k = km_partial_sum(&one, 0.5, n);
        let x = (-0.5f64).exp();
        let nf = n as f64;
        let closed = x * (1.0 - (nf + 1.0) * x.powf(nf) + nf * x.powf(nf + 1.0)) / (1.0 - x).powi(2);
        assert!(close(k.partial_sum, closed, 1e-10));
        assert_eq!(k.trend, Trend::Converging);
        assert_eq!(km_partial_sum(&one, 0.5, 0).partial_sum, 0.0);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_prefix(&SendSequence::constant(0.3).unwrap(), 10), 0.3);
        assert_eq!(median_prefix(&SendSequence::binary_exponential(), 4), 0.25);
        let alt = SendSequence::explicit(vec![1.0, 0.1, 1.0, 0.1], TailRule::Constant { c: 1.0 }).unwrap();
        assert_eq!(median_prefix(&alt, 3), 0.1);
    }

    #[test]
    fn sublinear_detection() {
        assert!(check_sublinear_decay(&SendSequence::polynomial(2.0).unwrap(), 10_000).evidence);
        assert!(!check_sublinear_decay(&SendSequence::binary_exponential(), 10_000).evidence);
        assert!(check_sublinear_decay(&SendSequence::constant(0.4).unwrap(), 10_000).evidence);
    }

    #[test]
    fn lced_examples() {
        let beb = check_lced_prefix(&SendSequence::binary_exponential(), 10_000);
        assert!(!beb.largely_constant_holds);
        assert!(!beb.likely);

        let rho_interleaved = SendSequence::interleaved(0.25, Splices::DoublyExponential, TailRule::InvLogLog).unwrap();
        let r = check_lced_prefix(&rho_interleaved, 100_000);
        assert!(!r.largely_constant_holds, "{r:?}");

        let half = SendSequence::interleaved(0.5, Splices::DoublyExponential, TailRule::Constant { c: 0.5 }).unwrap();
        let r = check_lced_prefix(&half, 100_000);
        assert!(r.largely_constant_holds && r.exponential_decay_holds && r.not_super_exponential_holds, "{r:?}");
        assert!(r.likely);
    }

    #[test]
    fn classify_examples() {
        let de = SendSequence::doubly_exponential(2.0).unwrap();
        assert_eq!(classify(&de, 0.5, 10_000).case, InstabilityCase::Killer);
        let poly = SendSequence::polynomial(2.0).unwrap();
        assert_eq!(classify(&poly, 0.5, 10_000).case, InstabilityCase::KellyMacphee);
        let beb = classify(&SendSequence::binary_exponential(), 0.5, 10_000);
        assert_eq!(beb.case, InstabilityCase::Suitable);
        assert!(beb.certificates().iter().any(|c| c.eta == 0.5 && c.nu == 0.4));
    }

    #[test]
    fn inverse_sums_match_direct_summation() {
        let seqs = [
            SendSequence::constant(0.3).unwrap(),
            SendSequence::geometric(0.8).unwrap(),
            SendSequence::binary_exponential(),
        ];
        for s in &seqs {
            let closed = s.inverse_sum(3, 40, 0).unwrap();
            let direct: f64 = (3..=40).map(|j| 1.0 / s.eval(j)).sum();
            assert!(close(closed, direct, 1e-12), "{s:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_sequence() -> impl Strategy<Value = SendSequence> {
            prop_oneof![
                (0.001f64..=1.0).prop_map(|c| SendSequence::constant(c).unwrap()),
                (0.01f64..0.99).prop_map(|r| SendSequence::geometric(r).unwrap()),
                Just(SendSequence::binary_exponential()),
                (0.1f64..4.0).prop_map(|a| SendSequence::polynomial(a).unwrap()),
                (1.1f64..4.0).prop_map(|b| SendSequence::doubly_exponential(b).unwrap()),
                (0.01f64..0.99).prop_map(|r| SendSequence::interleaved(r, Splices::DoublyExponential, TailRule::InvLogLog).unwrap()),
            ]
        }

        proptest! {
            #[test]
            fn eval_is_total_and_pure(seq in any_sequence(), j in 0u64..1_000_000) {
                let a = seq.eval(j);
                prop_assert!(a > 0.0 && a <= 1.0);
                prop_assert_eq!(a.to_bits(), seq.clone().eval(j).to_bits());
                prop_assert!(seq.ln_inv(j) >= 0.0);
            }

            #[test]
            fn mu_tau_monotone_and_bounded(seq in any_sequence(), tmax in 1u64..120) {
                let prof = mu_tau_profile(&seq, tmax);
                for t in 1..prof.len() {
                    prop_assert!(prof[t] + 1e-12 >= prof[t - 1]);
                    prop_assert!(prof[t] <= t as f64 + 1e-9);
                }
            }
        }
    }
}
