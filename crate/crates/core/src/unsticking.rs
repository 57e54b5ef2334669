//! Random unsticking and its time reversal.
//!
//! In the random-unsticking process every stuck sender unsticks on its own
//! coin with probability `p_unstick(t)`. The reverse process starts from the
//! stationary bins, lets senders move down one bin at a time until they leave
//! from bin 1, and flips an unstick coin for every ball at every step.
//! Ball trajectories of the two processes correspond one to one through the
//! time-reversal bijection, which preserves their Poisson rates.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};
use thiserror::Error;

use crate::backoff::{BinCounts, DrawSource};
use crate::blocks::{BlockError, BlockTable};
use crate::engine::RngStream;
use crate::jammed::{advance, JammedState};
use crate::sequences::SendSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("invalid trajectory: {0}")]
    Invalid(String),
    #[error("enumeration budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error(transparent)]
    Table(#[from] BlockError),
}

/// `1` for `t <= t0`, else `exp(-zeta |bins(t - t0)| / 16)`.
pub fn p_unstick(table: &BlockTable, t0: u64, t: u64) -> Result<f64, BlockError> {
    assert!(t >= 1);
    if t <= t0 {
        return Ok(1.0);
    }
    let n = table.bins_len(u128::from(t - t0))?;
    Ok((-table.zeta * n as f64 / 16.0).exp())
}

/// `p_unstick(t)` tabulated for `t = 1..=t0 + tau_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnstickSchedule {
    pub t0: u64,
    pub tau_end: u64,
    values: Vec<f64>,
}

impl UnstickSchedule {
    pub fn new(table: &BlockTable, t0: u64, tau_end: u64) -> Result<Self, BlockError> {
        let values = (1..=t0 + tau_end).map(|t| p_unstick(table, t0, t)).collect::<Result<_, _>>()?;
        Ok(Self { t0, tau_end, values })
    }

    /// Constant probability after `t0`, for experiments that force it.
    pub fn constant(t0: u64, tau_end: u64, q: f64) -> Self {
        let values = (1..=t0 + tau_end).map(|t| if t <= t0 { 1.0 } else { q }).collect();
        Self { t0, tau_end, values }
    }

    /// `p_unstick(t)` in the forward process.
    pub fn forward(&self, t: u64) -> f64 {
        self.values[t as usize - 1]
    }

    /// The probability used by the reverse process at its step `tau`:
    /// `p_unstick(t0 + tau_end - tau + 1)`.
    pub fn reverse(&self, tau: u64) -> f64 {
        self.forward(self.t0 + self.tau_end - tau + 1)
    }
}

// ---------------------------------------------------------------------------
// Random-unsticking process.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomUnstickEvents {
    pub t: u64,
    pub stuck_senders: Vec<u64>,
    /// Newly unstuck balls per destination bin.
    pub unstuck_now: Vec<u64>,
}

/// One step: the jammed dynamics, then each stuck sender unsticks
/// independently with probability `p` (drawn per source bin from `coins.at(t).at(j)`).
pub fn step_random_unsticking(
    state: &mut JammedState,
    seq: &SendSequence,
    p: f64,
    draws: &mut impl DrawSource,
    coins: &RngStream,
) -> RandomUnstickEvents {
    let t = state.t + 1;
    let (_, stuck_senders, _) = advance(state, seq, state.lambda, t, draws);
    let mut unstuck_now = vec![0u64; stuck_senders.len() + 1];
    let step = coins.at(t);
    for (j, &k) in stuck_senders.iter().enumerate() {
        let u = step.at(j as u64).draw_binomial(k, p);
        if u > 0 {
            let dest = j as u64 + 1;
            state.stuck.sub(dest, u);
            if dest <= state.j_obs {
                state.unstuck.add(dest, u);
            }
            state.unsticks += u;
            unstuck_now[dest as usize] = u;
        }
    }
    RandomUnstickEvents { t, stuck_senders, unstuck_now }
}

// ---------------------------------------------------------------------------
// Trajectories.

/// A ball of the random-unsticking process born at `t_birth >= t0 + 1` and
/// followed up to `t0 + tau_end`. It ends in bin `J = sojourns.len()`;
/// `flags[k]` is the unstick indicator at time `t_birth + k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForwardTrajectory {
    pub t_birth: u64,
    pub sojourns: Vec<u64>,
    pub flags: Vec<bool>,
}

/// A ball of the reverse process that starts in bin `J = sojourns.len()` and
/// leaves from bin 1 at `tau_leave`; `flags[k]` is the indicator at step `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReverseTrajectory {
    pub tau_leave: u64,
    pub sojourns: Vec<u64>,
    pub flags: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "direction", rename_all = "kebab-case")]
pub enum Trajectory {
    Forward(ForwardTrajectory),
    Reverse(ReverseTrajectory),
}

impl ForwardTrajectory {
    pub fn bin(&self) -> u64 {
        self.sojourns.len() as u64
    }

    pub fn validate(&self, t0: u64, tau_end: u64) -> Result<(), TrajectoryError> {
        let end = t0 + tau_end;
        if self.t_birth < t0 + 1 || self.t_birth > end {
            return Err(TrajectoryError::Invalid(format!("t_birth {} outside [{}, {end}]", self.t_birth, t0 + 1)));
        }
        let len = end - self.t_birth + 1;
        if self.sojourns.is_empty() || self.sojourns.contains(&0) || self.sojourns.iter().sum::<u64>() != len {
            return Err(TrajectoryError::Invalid(format!("sojourns {:?} must be positive and sum to {len}", self.sojourns)));
        }
        if self.flags.len() as u64 != len {
            return Err(TrajectoryError::Invalid(format!("{} flags, expected {len}", self.flags.len())));
        }
        Ok(())
    }

    /// `S(B)`: times at which the ball sends, from birth (bin 0) up to bin `J - 1`.
    pub fn send_times(&self) -> Vec<u64> {
        let mut t = self.t_birth;
        let mut out = vec![t];
        for &n in &self.sojourns[..self.sojourns.len() - 1] {
            t += n;
            out.push(t);
        }
        out
    }

    pub fn flag_at(&self, t: u64) -> bool {
        self.flags[(t - self.t_birth) as usize]
    }

    /// `F1 F2 F3` with `F1 = lambda (1-p_J)^(N_J-1)`,
    /// `F2 = prod_{j<J} p_j (1-p_j)^(N_j-1)` and the unstick factor `F3`.
    pub fn mean(&self, seq: &SendSequence, lambda: f64, sched: &UnstickSchedule) -> f64 {
        let jj = self.sojourns.len();
        let pj = seq.eval(jj as u64);
        let f1 = lambda * (1.0 - pj).powi(self.sojourns[jj - 1] as i32 - 1);
        let f2: f64 = self.sojourns[..jj - 1]
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let p = seq.eval(k as u64 + 1);
                p * (1.0 - p).powi(n as i32 - 1)
            })
            .product();
        let f3: f64 = self
            .flags
            .iter()
            .enumerate()
            .map(|(k, &u)| {
                let q = sched.forward(self.t_birth + k as u64);
                if u { q } else { 1.0 - q }
            })
            .product();
        f1 * f2 * f3
    }
}

impl ReverseTrajectory {
    pub fn bin(&self) -> u64 {
        self.sojourns.len() as u64
    }

    pub fn validate(&self, tau_end: u64, j_max: u64) -> Result<(), TrajectoryError> {
        if self.tau_leave < 1 || self.tau_leave > tau_end {
            return Err(TrajectoryError::Invalid(format!("tau_leave {} outside [1, {tau_end}]", self.tau_leave)));
        }
        if self.sojourns.is_empty() || self.bin() > j_max {
            return Err(TrajectoryError::Invalid(format!("bin {} outside [1, {j_max}]", self.bin())));
        }
        if self.sojourns.contains(&0) || self.sojourns.iter().sum::<u64>() != self.tau_leave {
            return Err(TrajectoryError::Invalid(format!("sojourns {:?} must be positive and sum to {}", self.sojourns, self.tau_leave)));
        }
        if self.flags.len() as u64 != self.tau_leave {
            return Err(TrajectoryError::Invalid(format!("{} flags, expected {}", self.flags.len(), self.tau_leave)));
        }
        Ok(())
    }

    /// `S~(B~)`: suffix sums `sum_{k=c}^{J} N_k` for `c = 1..=J`.
    pub fn send_times(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.sojourns.len());
        let mut s = 0;
        for &n in self.sojourns.iter().rev() {
            s += n;
            out.push(s);
        }
        out
    }

    pub fn flag_at(&self, tau: u64) -> bool {
        self.flags[tau as usize - 1]
    }

    /// `F~1 F~2 F~3` with `F~1 = lambda / p_J` and `F~2 = prod_{j<=J} p_j (1-p_j)^(N_j-1)`.
    pub fn mean(&self, seq: &SendSequence, lambda: f64, sched: &UnstickSchedule) -> f64 {
        let jj = self.sojourns.len() as u64;
        let f1 = lambda / seq.eval(jj);
        let f2: f64 = self
            .sojourns
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let p = seq.eval(k as u64 + 1);
                p * (1.0 - p).powi(n as i32 - 1)
            })
            .product();
        let f3: f64 = self
            .flags
            .iter()
            .enumerate()
            .map(|(k, &u)| {
                let q = sched.reverse(k as u64 + 1);
                if u { q } else { 1.0 - q }
            })
            .product();
        f1 * f2 * f3
    }
}

/// `J_max = u(I(tau_end) - 1) + tau_end`.
pub fn j_max(table: &BlockTable, tau_end: u64) -> Result<u64, BlockError> {
    let (_, hi) = table.bins_of_tau(u128::from(tau_end))?;
    Ok(hi + tau_end)
}

/// The time-reversal bijection.
pub fn reverse_bijection(b: &ForwardTrajectory, t0: u64, tau_end: u64, j_max: u64) -> Result<ReverseTrajectory, TrajectoryError> {
    b.validate(t0, tau_end)?;
    if b.bin() > j_max {
        return Err(TrajectoryError::Invalid(format!("bin {} exceeds J_max = {j_max}", b.bin())));
    }
    let tau_leave = tau_end + t0 + 1 - b.t_birth;
    // unstick(pi(B), tau_end - t' + t0 + 1) = unstick(B, t'): reverse order.
    let flags = b.flags.iter().rev().copied().collect();
    Ok(ReverseTrajectory { tau_leave, sojourns: b.sojourns.clone(), flags })
}

pub fn reverse_bijection_inverse(r: &ReverseTrajectory, t0: u64, tau_end: u64, j_max: u64) -> Result<ForwardTrajectory, TrajectoryError> {
    r.validate(tau_end, j_max)?;
    let t_birth = tau_end + t0 + 1 - r.tau_leave;
    let flags = r.flags.iter().rev().copied().collect();
    Ok(ForwardTrajectory { t_birth, sojourns: r.sojourns.clone(), flags })
}

/// Forward Fill membership for a ball ending in bin `j` of block `B_i`: born
/// at or after `max(t0 + 1, t0 + tau_end - kappa sum_{k<=i} ceil(W_k))` and
/// not unsticking at any of its send times.
pub fn fill_forward(b: &ForwardTrajectory, table: &BlockTable, t0: u64, tau_end: u64) -> bool {
    let i = table.block_of_bin(b.bin());
    let Some(window) = table.fill_window(i) else { return false };
    let lower = u128::from(t0 + 1).max(u128::from(t0 + tau_end).saturating_sub(window));
    u128::from(b.t_birth) >= lower && b.send_times().iter().all(|&t| !b.flag_at(t))
}

/// Reverse Fill membership: leaves by `min(tau_end, 1 + kappa sum_{k<=i} ceil(W_k))`
/// and does not unstick at any of its send times.
pub fn fill_reverse(r: &ReverseTrajectory, table: &BlockTable, tau_end: u64) -> bool {
    let i = table.block_of_bin(r.bin());
    let Some(window) = table.fill_window(i) else { return false };
    let upper = u128::from(tau_end).min(window.saturating_add(1));
    u128::from(r.tau_leave) <= upper && r.send_times().iter().all(|&t| !r.flag_at(t))
}

// ---------------------------------------------------------------------------
// Enumeration.

/// All ways to write `total` as `parts` positive integers.
pub fn compositions(total: u64, parts: u64) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(parts as usize);
    fn rec(rem: u64, parts: u64, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if parts == 1 {
            if rem >= 1 {
                cur.push(rem);
                out.push(cur.clone());
                cur.pop();
            }
            return;
        }
        for first in 1..rem.saturating_sub(parts - 2) {
            cur.push(first);
            rec(rem - first, parts - 1, cur, out);
            cur.pop();
        }
    }
    if parts >= 1 && total >= parts {
        rec(total, parts, &mut cur, &mut out);
    }
    out
}

fn flag_patterns(len: u64) -> impl Iterator<Item = Vec<bool>> {
    (0..1u64 << len).map(move |m| (0..len).map(|k| m >> k & 1 == 1).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBounds {
    pub t0: u64,
    pub tau_end: u64,
    pub max_bin: u64,
}

fn check_bounds(b: &EnumerationBounds) -> Result<(), TrajectoryError> {
    if b.tau_end == 0 || b.tau_end > 6 || b.max_bin == 0 || b.max_bin > 4 {
        return Err(TrajectoryError::BudgetExceeded(format!(
            "enumeration supports 1 <= tau_end <= 6 and 1 <= J <= 4, got tau_end={}, J={}",
            b.tau_end, b.max_bin
        )));
    }
    Ok(())
}

/// Every forward trajectory with `t_birth` in `t0+1..=t0+tau_end`, bin
/// `J <= max_bin`, and every flag pattern.
pub fn enumerate_forward(b: &EnumerationBounds) -> Result<Vec<ForwardTrajectory>, TrajectoryError> {
    check_bounds(b)?;
    let mut out = Vec::new();
    for t_birth in b.t0 + 1..=b.t0 + b.tau_end {
        let len = b.t0 + b.tau_end - t_birth + 1;
        for jj in 1..=b.max_bin {
            for sojourns in compositions(len, jj) {
                for flags in flag_patterns(len) {
                    out.push(ForwardTrajectory { t_birth, sojourns: sojourns.clone(), flags });
                }
            }
        }
    }
    Ok(out)
}

/// Every reverse trajectory leaving by `tau_end` from a start bin `J <= max_bin`.
pub fn enumerate_reverse(b: &EnumerationBounds) -> Result<Vec<ReverseTrajectory>, TrajectoryError> {
    check_bounds(b)?;
    let mut out = Vec::new();
    for tau_leave in 1..=b.tau_end {
        for jj in 1..=b.max_bin {
            for sojourns in compositions(tau_leave, jj) {
                for flags in flag_patterns(tau_leave) {
                    out.push(ReverseTrajectory { tau_leave, sojourns: sojourns.clone(), flags });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeReversalReport {
    pub bounds: EnumerationBounds,
    pub trajectories: u64,
    pub max_relative_error: f64,
    pub send_set_failures: u64,
    pub round_trip_failures: u64,
    pub fill_failures: u64,
    /// Reverse trajectories not hit by the bijection.
    pub unmatched_reverse: u64,
}

impl TimeReversalReport {
    pub fn pass(&self) -> bool {
        self.max_relative_error <= 1e-12
            && self.send_set_failures == 0
            && self.round_trip_failures == 0
            && self.fill_failures == 0
            && self.unmatched_reverse == 0
    }
}

/// Exhaustive check of the bijection: rate equality, send-set relation,
/// round trip, Fill correspondence, and surjectivity onto the reverse
/// trajectories of the same bounds.
pub fn verify_time_reversal(
    seq: &SendSequence,
    lambda: f64,
    table: &BlockTable,
    bounds: EnumerationBounds,
) -> Result<TimeReversalReport, TrajectoryError> {
    let EnumerationBounds { t0, tau_end, .. } = bounds;
    let sched = UnstickSchedule::new(table, t0, tau_end)?;
    let jm = j_max(table, tau_end)?;
    let forward = enumerate_forward(&bounds)?;
    let mut reverse: HashMap<ReverseTrajectory, bool> =
        enumerate_reverse(&bounds)?.into_iter().map(|r| (r, false)).collect();
    let mut rep = TimeReversalReport {
        bounds,
        trajectories: forward.len() as u64,
        max_relative_error: 0.0,
        send_set_failures: 0,
        round_trip_failures: 0,
        fill_failures: 0,
        unmatched_reverse: 0,
    };
    for b in &forward {
        let r = reverse_bijection(b, t0, tau_end, jm)?;
        let (mf, mr) = (b.mean(seq, lambda, &sched), r.mean(seq, lambda, &sched));
        let err = if mf == mr { 0.0 } else { (mf - mr).abs() / mf.abs().max(mr.abs()) };
        rep.max_relative_error = rep.max_relative_error.max(err);
        let mut mapped: Vec<u64> = b.send_times().iter().map(|&t| tau_end + t0 + 1 - t).collect();
        let mut st = r.send_times();
        mapped.sort_unstable();
        st.sort_unstable();
        rep.send_set_failures += u64::from(mapped != st);
        rep.round_trip_failures += u64::from(reverse_bijection_inverse(&r, t0, tau_end, jm)? != *b);
        rep.fill_failures += u64::from(fill_forward(b, table, t0, tau_end) != fill_reverse(&r, table, tau_end));
        if let Some(seen) = reverse.get_mut(&r) {
            *seen = true;
        } else {
            rep.round_trip_failures += 1;
        }
    }
    rep.unmatched_reverse = reverse.values().filter(|&&s| !s).count() as u64;
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Reverse process simulation.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseBall {
    pub start: u64,
    pub bin: u64,
    /// Steps spent in each bin so far, `sojourns[j - 1]` for bin `j`.
    pub sojourns: Vec<u64>,
    pub flags: Vec<bool>,
    pub left: Option<u64>,
}

impl ReverseBall {
    pub fn trajectory(&self) -> Option<ReverseTrajectory> {
        self.left.map(|tau_leave| ReverseTrajectory {
            tau_leave,
            sojourns: self.sojourns.clone(),
            flags: self.flags.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseState {
    pub tau: u64,
    pub j_max: u64,
    pub balls: Vec<ReverseBall>,
}

impl ReverseState {
    /// Poisson(`lambda/p_j`) balls in each bin of `bins` (a sub-range of
    /// `1..=j_max`), drawn from `init.at(j)`.
    pub fn init(seq: &SendSequence, lambda: f64, j_max: u64, bins: (u64, u64), init: &RngStream) -> Self {
        assert!(bins.0 >= 1 && bins.1 <= j_max);
        let mut balls = Vec::new();
        for j in bins.0..=bins.1 {
            let n = init.at(j).draw_poisson(lambda / seq.eval(j));
            for _ in 0..n {
                balls.push(ReverseBall { start: j, bin: j, sojourns: vec![0; j as usize], flags: Vec::new(), left: None });
            }
        }
        Self { tau: 0, j_max, balls }
    }

    pub fn bins(&self) -> BinCounts {
        let mut b = BinCounts::default();
        for ball in self.balls.iter().filter(|b| b.left.is_none()) {
            b.add(ball.bin, 1);
        }
        b
    }
}

/// One step: every present ball flips its unstick coin with probability `q`,
/// then sends with `p_j`; senders move down a bin, and senders from bin 1 leave.
pub fn step_reverse(state: &mut ReverseState, seq: &SendSequence, q: f64, stream: &RngStream) {
    let tau = state.tau + 1;
    let mut s = stream.at(tau);
    for ball in state.balls.iter_mut().filter(|b| b.left.is_none()) {
        ball.sojourns[ball.bin as usize - 1] += 1;
        ball.flags.push(s.draw_bernoulli(q));
        if s.draw_bernoulli(seq.eval(ball.bin)) {
            if ball.bin == 1 {
                ball.left = Some(tau);
            } else {
                ball.bin -= 1;
            }
        }
    }
    state.tau = tau;
}

/// A full reverse run over `tau_end` steps; balls start in `bins`.
pub fn run_reverse(
    seq: &SendSequence,
    lambda: f64,
    sched: &UnstickSchedule,
    j_max: u64,
    bins: (u64, u64),
    root: &RngStream,
) -> ReverseState {
    let mut st = ReverseState::init(seq, lambda, j_max, bins, &root.split("init"));
    let steps = root.split("steps");
    for tau in 1..=sched.tau_end {
        step_reverse(&mut st, seq, sched.reverse(tau), &steps);
    }
    st
}

// ---------------------------------------------------------------------------
// Fill domination experiment.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillConfig {
    pub lambda: f64,
    pub t0: u64,
    pub tau_end: u64,
    pub replicas: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub threshold: u64,
    pub empirical: f64,
    pub poisson: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillRow {
    pub bin: u64,
    /// `lambda / (4 p_j)`
    pub target: f64,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub mean_pass: bool,
    pub tails: Vec<TailCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillReport {
    pub config: FillConfig,
    pub bins: (u64, u64),
    pub rows: Vec<FillRow>,
    /// `(j, k, r)` for every pair of bins.
    pub correlations: Vec<(u64, u64, f64)>,
    pub correlation_bound: f64,
    pub pass: bool,
}

/// Size of `Fill_j` in one replica of the reverse process, for a ball
/// population started in bin `j`. Balls are independent, so each is walked
/// down on its own: a geometric sojourn per bin and an unstick coin at every
/// send time.
fn fill_count(seq: &SendSequence, lambda: f64, j: u64, limit: u64, sched: &UnstickSchedule, s: &mut RngStream) -> u64 {
    let n = s.draw_poisson(lambda / seq.eval(j));
    let mut count = 0;
    'ball: for _ in 0..n {
        let mut tau = 0u64;
        for k in (1..=j).rev() {
            tau += s.draw_wait(seq.eval(k));
            if tau > limit {
                continue 'ball;
            }
            if s.draw_bernoulli(sched.reverse(tau)) {
                continue 'ball;
            }
        }
        count += 1;
    }
    count
}

/// Simulates the reverse process for every start bin in `bins(tau_end)` and
/// compares `|Fill_j|` with Poisson(`lambda/(4 p_j)`): a one-sided mean test
/// at 3 standard errors, tail tests at `ceil(m/2)` and `ceil(m)`, and
/// pairwise correlations against `4/sqrt(replicas)`.
pub fn poisson_domination_experiment(
    seq: &SendSequence,
    table: &BlockTable,
    cfg: &FillConfig,
) -> Result<FillReport, TrajectoryError> {
    let sched = UnstickSchedule::new(table, cfg.t0, cfg.tau_end)?;
    let bins = table.bins_of_tau(u128::from(cfg.tau_end))?;
    let i = table.block_of_bin(bins.0);
    let window = table.fill_window(i).ok_or_else(|| TrajectoryError::Invalid("fill window overflows".into()))?;
    let limit = u128::from(cfg.tau_end).min(window + 1) as u64;
    let root = RngStream::new(cfg.seed).split("fill-domination");
    let js: Vec<u64> = (bins.0..=bins.1).collect();
    let samples: Vec<Vec<u64>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let rep = root.at(r);
            js.iter().map(|&j| fill_count(seq, cfg.lambda, j, limit, &sched, &mut rep.at(j))).collect()
        })
        .collect();
    let n = cfg.replicas as f64;
    let mut rows = Vec::new();
    let mut pass = true;
    for (c, &j) in js.iter().enumerate() {
        let xs: Vec<f64> = samples.iter().map(|s| s[c] as f64).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std_error = (variance / n).sqrt();
        let target = cfg.lambda / (4.0 * seq.eval(j));
        let mean_pass = mean >= target - 3.0 * std_error;
        let pois = Poisson::new(target).map_err(|e| TrajectoryError::Invalid(e.to_string()))?;
        let tails = [(target / 2.0).ceil() as u64, target.ceil() as u64]
            .into_iter()
            .map(|k| {
                let empirical = xs.iter().filter(|&&x| x >= k as f64).count() as f64 / n;
                let poisson = if k == 0 { 1.0 } else { pois.sf(k - 1) };
                let se = (empirical * (1.0 - empirical) / n).sqrt().max(1.0 / n);
                TailCheck { threshold: k, empirical, poisson, pass: empirical >= poisson - 3.0 * se }
            })
            .collect::<Vec<_>>();
        pass &= mean_pass && tails.iter().all(|t| t.pass);
        rows.push(FillRow { bin: j, target, mean, variance, std_error, mean_pass, tails });
    }
    let bound = 4.0 / n.sqrt();
    let mut correlations = Vec::new();
    for a in 0..js.len() {
        for b in a + 1..js.len() {
            let xa: Vec<f64> = samples.iter().map(|s| s[a] as f64).collect();
            let xb: Vec<f64> = samples.iter().map(|s| s[b] as f64).collect();
            let r = crate::analysis::pearson(&xa, &xb);
            pass &= r.abs() <= bound || r.is_nan();
            correlations.push((js[a], js[b], r));
        }
    }
    Ok(FillReport { config: cfg.clone(), bins, rows, correlations, correlation_bound: bound, pass })
}
