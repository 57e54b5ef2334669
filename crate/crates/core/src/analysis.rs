//! Statistical checks shared by the verifiers: Chernoff bounds against exact
//! tails, quiet-period scanning, stationarity of the jammed process, and the
//! single-step empty-stucksend bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson};
use thiserror::Error;

use crate::backoff::{BinCounts, DrawSource, RunLog, SenderClass, StreamDraws};
use crate::engine::RngStream;
use crate::jammed::{jammed_root, step_jammed, JammedError, JammedState};
use crate::sequences::SendSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Jammed(#[from] JammedError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    /// `statistic <= reference + tolerance`
    AtMost,
    /// `statistic >= reference - tolerance`
    AtLeast,
    /// `|statistic - reference| <= tolerance`
    Within,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub name: String,
    pub sample_size: u64,
    pub statistic: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub relation: Relation,
    pub pass: bool,
    pub seeds: Vec<u64>,
}

impl TestReport {
    pub fn new(
        name: impl Into<String>,
        sample_size: u64,
        statistic: f64,
        reference: f64,
        tolerance: f64,
        relation: Relation,
        seeds: Vec<u64>,
    ) -> Self {
        let mut r = Self { name: name.into(), sample_size, statistic, reference, tolerance, relation, pass: false, seeds };
        r.pass = r.recompute();
        r
    }

    pub fn recompute(&self) -> bool {
        match self.relation {
            Relation::AtMost => self.statistic <= self.reference + self.tolerance,
            Relation::AtLeast => self.statistic >= self.reference - self.tolerance,
            Relation::Within => (self.statistic - self.reference).abs() <= self.tolerance,
        }
    }
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v)
}

/// Sample correlation; NaN when either sample is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (mx, _) = mean_var(xs);
    let (my, _) = mean_var(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

// ---------------------------------------------------------------------------
// Chernoff bounds.

/// `e^(-delta^2 mu / 2)`, bounding `P(X <= (1 - delta) mu)`.
pub fn chernoff_lower_bound(mu: f64, delta: f64) -> Result<f64, AnalysisError> {
    if !(mu > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(AnalysisError::Invalid(format!("need mu > 0 and 0 < delta < 1, got mu={mu}, delta={delta}")));
    }
    Ok((-delta * delta * mu / 2.0).exp())
}

/// `e^(-mu x (ln x - 1))`, bounding `P(X >= x mu)` for `x > 1`.
pub fn chernoff_upper_bound(mu: f64, x: f64) -> Result<f64, AnalysisError> {
    if !(mu > 0.0) || !(x > 1.0) {
        return Err(AnalysisError::Invalid(format!("need mu > 0 and x > 1, got mu={mu}, x={x}")));
    }
    Ok((-mu * x * (x.ln() - 1.0)).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum TailLaw {
    Poisson { mu: f64 },
    Binomial { n: u64, p: f64 },
}

impl TailLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            TailLaw::Poisson { mu } => mu,
            TailLaw::Binomial { n, p } => n as f64 * p,
        }
    }

    /// `P(X <= k)`.
    pub fn cdf(&self, k: u64) -> f64 {
        match *self {
            TailLaw::Poisson { mu } => Poisson::new(mu).unwrap().cdf(k),
            TailLaw::Binomial { n, p } => Binomial::new(p, n).unwrap().cdf(k),
        }
    }

    /// `P(X >= k)`.
    pub fn sf_from(&self, k: u64) -> f64 {
        if k == 0 {
            return 1.0;
        }
        match *self {
            TailLaw::Poisson { mu } => Poisson::new(mu).unwrap().sf(k - 1),
            TailLaw::Binomial { n, p } => {
                if k > n {
                    0.0
                } else {
                    Binomial::new(p, n).unwrap().sf(k - 1)
                }
            }
        }
    }

    pub fn pmf(&self, k: u64) -> f64 {
        match *self {
            TailLaw::Poisson { mu } => Poisson::new(mu).unwrap().pmf(k),
            TailLaw::Binomial { n, p } => Binomial::new(p, n).unwrap().pmf(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChernoffCase {
    pub law: TailLaw,
    /// `delta` for the lower tail, `x` for the upper tail.
    pub parameter: f64,
    pub exact: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChernoffGridReport {
    pub lower: Vec<ChernoffCase>,
    pub upper: Vec<ChernoffCase>,
    pub violations: u64,
}

fn grid_laws(mu: f64) -> Vec<TailLaw> {
    let mut laws = vec![TailLaw::Poisson { mu }];
    for factor in [2.0, 10.0, 100.0] {
        let n = (factor * mu).ceil() as u64;
        laws.push(TailLaw::Binomial { n, p: mu / n as f64 });
    }
    laws
}

/// Both bounds against exact Poisson and matched binomial tails on a grid of
/// means; the upper grid includes Binomial(40, 0.1) at `x = 10`.
pub fn chernoff_grid() -> ChernoffGridReport {
    let mut lower = Vec::new();
    for mu in [1.0, 8.0, 64.0] {
        for delta in [0.25, 0.5, 0.9] {
            let bound = chernoff_lower_bound(mu, delta).unwrap();
            for law in grid_laws(mu) {
                let exact = law.cdf(((1.0 - delta) * mu).floor() as u64);
                lower.push(ChernoffCase { law, parameter: delta, exact, bound, holds: exact <= bound });
            }
        }
    }
    let mut upper = Vec::new();
    for mu in [1.0, 4.0, 8.0, 64.0] {
        for x in [1.5, 2.0, std::f64::consts::E, 3.0, 5.0, 10.0] {
            let bound = chernoff_upper_bound(mu, x).unwrap();
            let mut laws = grid_laws(mu);
            if mu == 4.0 {
                laws.push(TailLaw::Binomial { n: 40, p: 0.1 });
            }
            for law in laws {
                let exact = law.sf_from((x * mu).ceil() as u64);
                upper.push(ChernoffCase { law, parameter: x, exact, bound, holds: exact <= bound });
            }
        }
    }
    let violations = lower.iter().chain(&upper).filter(|c| !c.holds).count() as u64;
    ChernoffGridReport { lower, upper, violations }
}

// ---------------------------------------------------------------------------
// Quiet periods.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuietScan {
    /// Maximal runs `(first, last)` of recorded steps with noise < 1.
    pub intervals: Vec<(u64, u64)>,
    pub quiet_steps: u64,
    pub longest: u64,
    pub quiet_fraction: f64,
    /// Quiet fraction per window of `records / windows` records.
    pub window_fractions: Vec<f64>,
}

impl QuietScan {
    /// Whether some quiet interval starts after a noisy record.
    pub fn quiet_after_noisy(&self, first_t: u64) -> bool {
        self.intervals.iter().any(|&(a, _)| a > first_t)
    }
}

/// Scans recorded steps for noise below 1. With a stride above 1 the
/// intervals are in units of records, reported by their times.
pub fn quiet_period_scan(log: &RunLog, windows: usize) -> QuietScan {
    let recs = &log.records;
    let mut intervals = Vec::new();
    let mut open: Option<(u64, u64)> = None;
    let mut quiet_steps = 0;
    for r in recs {
        if r.noise < 1.0 {
            quiet_steps += 1;
            open = Some(match open {
                Some((a, _)) => (a, r.t),
                None => (r.t, r.t),
            });
        } else if let Some(iv) = open.take() {
            intervals.push(iv);
        }
    }
    intervals.extend(open);
    let stride = log.stride.max(1);
    let longest = intervals.iter().map(|&(a, b)| (b - a) / stride + 1).max().unwrap_or(0);
    let quiet_fraction = if recs.is_empty() { 0.0 } else { quiet_steps as f64 / recs.len() as f64 };
    let window_fractions = if windows == 0 || recs.len() < windows {
        Vec::new()
    } else {
        recs.chunks(recs.len() / windows)
            .take(windows)
            .map(|c| c.iter().filter(|r| r.noise < 1.0).count() as f64 / c.len() as f64)
            .collect()
    };
    QuietScan { intervals, quiet_steps, longest, quiet_fraction, window_fractions }
}

// ---------------------------------------------------------------------------
// Stationarity.

/// Deliberate breakage for negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sabotage {
    #[default]
    None,
    SkipBirths,
}

struct Sabotaged<D> {
    inner: D,
    sabotage: Sabotage,
}

impl<D: DrawSource> DrawSource for Sabotaged<D> {
    fn births(&mut self, t: u64, mean: f64) -> u64 {
        match self.sabotage {
            Sabotage::None => self.inner.births(t, mean),
            Sabotage::SkipBirths => 0,
        }
    }

    fn senders(&mut self, t: u64, bin: u64, class: SenderClass, n: u64, p: f64) -> u64 {
        self.inner.senders(t, bin, class, n, p)
    }
}

/// Total (stuck plus unstuck) counts of bins `1..=max_bin` at time `t`, one
/// row per seed, from the externally-jammed process.
pub fn jammed_ensemble(
    seq: &SendSequence,
    lambda: f64,
    j_obs: u64,
    t: u64,
    max_bin: u64,
    seeds: &[u64],
    sabotage: Sabotage,
) -> Result<Vec<Vec<u64>>, AnalysisError> {
    if max_bin > j_obs {
        return Err(AnalysisError::Invalid(format!("max_bin {max_bin} above j_obs {j_obs}")));
    }
    seeds
        .par_iter()
        .map(|&seed| {
            let root = jammed_root(seed);
            let mut st = JammedState::init(seq, lambda, j_obs, &root.split("init"))?;
            let mut d = Sabotaged { inner: StreamDraws::new(root.clone()), sabotage };
            for _ in 0..t {
                step_jammed(&mut st, seq, &mut d);
            }
            (1..=max_bin).map(|j| st.total_at(j).map_err(AnalysisError::from)).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// One mean test per bin, tolerance 4 standard errors.
    pub bins: Vec<TestReport>,
    /// Pooled chi-square p-value against the Poisson(`lambda/p_j`) laws.
    pub chi_square: TestReport,
    pub chi_square_statistic: f64,
    pub degrees_of_freedom: u64,
    pub pass: bool,
}

/// Categories of `0..` merged so each has expected count at least `min_expected`.
fn poisson_categories(mu: f64, n: f64, min_expected: f64) -> Vec<(u64, Option<u64>, f64)> {
    let law = Poisson::new(mu).unwrap();
    let span = 12.0 * mu.sqrt() + 12.0;
    let lo = (mu - span).max(0.0).floor() as u64;
    let hi = (mu + span).ceil() as u64;
    let mut cats: Vec<(u64, Option<u64>, f64)> = Vec::new();
    let mut start = 0u64;
    let mut acc = if lo > 0 { law.cdf(lo - 1) } else { 0.0 };
    let first = lo;
    for k in first..=hi {
        acc += law.pmf(k);
        if acc * n >= min_expected {
            cats.push((start, Some(k), acc * n));
            start = k + 1;
            acc = 0.0;
        }
    }
    let tail = law.sf(hi) + acc;
    match cats.last_mut() {
        Some(last) if tail * n < min_expected => {
            last.1 = None;
            last.2 += tail * n;
        }
        _ => cats.push((start, None, tail * n)),
    }
    cats
}

/// Per-bin mean within 4 standard errors of `lambda/p_j`, and a pooled
/// chi-square goodness-of-fit at level `alpha`.
pub fn stationarity_test(
    seq: &SendSequence,
    lambda: f64,
    samples: &[Vec<u64>],
    seeds: &[u64],
    alpha: f64,
) -> Result<StationarityReport, AnalysisError> {
    if samples.len() < 100 {
        return Err(AnalysisError::Invalid(format!("need at least 100 replicas, got {}", samples.len())));
    }
    let n = samples.len() as f64;
    let nbins = samples[0].len();
    let mut bins = Vec::new();
    let mut stat = 0.0;
    let mut dof = 0u64;
    for c in 0..nbins {
        let j = c as u64 + 1;
        let mu = lambda / seq.eval(j);
        let xs: Vec<f64> = samples.iter().map(|s| s[c] as f64).collect();
        let (m, v) = mean_var(&xs);
        let se = (v.max(mu) / n).sqrt();
        bins.push(TestReport::new(format!("bin-{j}-mean"), samples.len() as u64, m, mu, 4.0 * se, Relation::Within, seeds.to_vec()));
        let cats = poisson_categories(mu, n, 5.0);
        if cats.len() < 2 {
            continue;
        }
        for (a, b, e) in &cats {
            let o = samples.iter().filter(|s| s[c] >= *a && b.is_none_or(|b| s[c] <= b)).count() as f64;
            stat += (o - e).powi(2) / e;
        }
        dof += cats.len() as u64 - 1;
    }
    let p = if dof == 0 { 1.0 } else { 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat) };
    let chi_square = TestReport::new("chi-square-p-value", samples.len() as u64, p, alpha, 0.0, Relation::AtLeast, seeds.to_vec());
    let pass = chi_square.pass && bins.iter().all(|b| b.pass);
    Ok(StationarityReport { bins, chi_square, chi_square_statistic: stat, degrees_of_freedom: dof, pass })
}

// ---------------------------------------------------------------------------
// Single-step bound.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StucksendCase {
    pub stuck: BinCounts,
    /// `lambda + sum_j p_j x_j`
    pub f: f64,
    /// `e^(-lambda/2) prod_j (1-p_j)^(x_j)`
    pub exact: f64,
    pub bound: f64,
    pub report: TestReport,
}

/// For one stream of the two-stream process with stuck vector `stuck`
/// (bins >= 1) and Poisson(`lambda/2`) newborns: the frequency of a step with
/// no stuck sender, against `exp(-f/3)` with a 3 sigma allowance.
pub fn empty_stucksend_bound_test(
    seq: &SendSequence,
    lambda: f64,
    stuck: &BinCounts,
    trials: u64,
    seed: u64,
) -> StucksendCase {
    let f = lambda + stuck.iter().filter(|&(j, _)| j >= 1).map(|(j, c)| c as f64 * seq.eval(j)).sum::<f64>();
    let exact = (-lambda / 2.0).exp()
        * stuck.iter().filter(|&(j, _)| j >= 1).map(|(j, c)| (1.0 - seq.eval(j)).powi(c as i32)).product::<f64>();
    let bound = (-f / 3.0).exp();
    let root = RngStream::new(seed).split("empty-stucksend");
    let empty = (0..trials)
        .into_par_iter()
        .filter(|&r| {
            let mut s = root.at(r);
            s.draw_poisson(lambda / 2.0) == 0
                && stuck.iter().filter(|&(j, c)| j >= 1 && c > 0).all(|(j, c)| s.draw_binomial(c, seq.eval(j)) == 0)
        })
        .count() as f64;
    let freq = empty / trials as f64;
    let sigma = (bound * (1.0 - bound).max(0.0) / trials as f64).sqrt();
    let report = TestReport::new(format!("empty-stucksend-f{f}"), trials, freq, bound, 3.0 * sigma, Relation::AtMost, vec![seed]);
    StucksendCase { stuck: stuck.clone(), f, exact, bound, report }
}

// ---------------------------------------------------------------------------
// Monte-Carlo for the expected number of sends.

/// Mean and standard error of the number of sends in `tau` steps of a ball
/// born in bin 0, over `samples` walks.
pub fn mu_tau_monte_carlo(seq: &SendSequence, tau: u64, samples: u64, seed: u64) -> (f64, f64) {
    let root = RngStream::new(seed).split("mu-tau");
    let xs: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|r| {
            let mut s = root.at(r);
            // Jump from send to send with geometric sojourns.
            let (mut t, mut bin, mut sends) = (0u64, 0u64, 0u64);
            loop {
                t += s.draw_wait(seq.eval(bin));
                if t > tau {
                    break;
                }
                sends += 1;
                bin += 1;
            }
            sends as f64
        })
        .collect();
    let (m, v) = mean_var(&xs);
    (m, (v / samples as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Drift.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftEvidence {
    pub early_t: u64,
    pub late_t: u64,
    pub median_early: f64,
    pub median_late: f64,
    pub ratio: f64,
    /// Seeds whose success rate is below `lambda`.
    pub below_lambda: u64,
    pub seeds: u64,
}

/// Median backlog at `late_t` against `early_t`, and how many runs escape
/// balls at a rate below the arrival rate.
pub fn drift_evidence(logs: &[RunLog], early_t: u64, late_t: u64) -> Option<DriftEvidence> {
    let at = |t: u64| -> Option<Vec<f64>> { logs.iter().map(|l| l.at(t).map(|r| r.backlog as f64)).collect() };
    let (e, l) = (at(early_t)?, at(late_t)?);
    let (median_early, median_late) = (median(&e), median(&l));
    Some(DriftEvidence {
        early_t,
        late_t,
        median_early,
        median_late,
        ratio: median_late / median_early,
        below_lambda: logs.iter().filter(|g| g.summary.success_rate < g.lambda).count() as u64,
        seeds: logs.len() as u64,
    })
}
