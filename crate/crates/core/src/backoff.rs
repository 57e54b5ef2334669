//! The backoff process: Poisson arrivals into bin 0, per-bin binomial
//! senders, escape on a lone sender, otherwise every sender moves up a bin.
//!
//! Balls in a bin are exchangeable, so state is a vector of bin counts.
//! Randomness is read through [`DrawSource`]; the stream-backed source keys
//! every draw by `(step, bin, class)` so coupled processes that hold the same
//! balls draw the same senders.

use serde::{Deserialize, Serialize};

use crate::engine::RngStream;
use crate::sequences::SendSequence;

/// Which population of a bin a sender draw belongs to. Balls that are present
/// in the backoff process draw from the primary class; balls that exist only
/// in an auxiliary process (unstuck balls) draw from the secondary class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SenderClass {
    Primary,
    Secondary,
}

impl SenderClass {
    fn label(self) -> &'static str {
        match self {
            SenderClass::Primary => "primary",
            SenderClass::Secondary => "secondary",
        }
    }
}

pub trait DrawSource {
    /// Number of newborns at step `t`.
    fn births(&mut self, t: u64, mean: f64) -> u64;
    /// Number of senders among `n` balls of `class` in bin `bin` at step `t`.
    fn senders(&mut self, t: u64, bin: u64, class: SenderClass, n: u64, p: f64) -> u64;
}

/// Draws keyed by `step/t/births` and `step/t/<bin>/<class>`.
#[derive(Clone, Debug)]
pub struct StreamDraws {
    root: RngStream,
}

impl StreamDraws {
    pub fn new(root: RngStream) -> Self {
        Self { root }
    }

    pub fn step(&self, t: u64) -> RngStream {
        self.root.split("step").at(t)
    }

    pub fn root(&self) -> &RngStream {
        &self.root
    }
}

impl DrawSource for StreamDraws {
    fn births(&mut self, t: u64, mean: f64) -> u64 {
        self.step(t).split("births").draw_poisson(mean)
    }

    fn senders(&mut self, t: u64, bin: u64, class: SenderClass, n: u64, p: f64) -> u64 {
        if n == 0 {
            return 0;
        }
        self.step(t).at(bin).split(class.label()).draw_binomial(n, p)
    }
}

/// Bin counts indexed from bin 0, without trailing empty bins.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinCounts(pub Vec<u64>);

impl BinCounts {
    pub fn get(&self, j: u64) -> u64 {
        self.0.get(j as usize).copied().unwrap_or(0)
    }

    pub fn add(&mut self, j: u64, n: u64) {
        if n == 0 {
            return;
        }
        let j = j as usize;
        if self.0.len() <= j {
            self.0.resize(j + 1, 0);
        }
        self.0[j] += n;
    }

    pub fn sub(&mut self, j: u64, n: u64) {
        if n == 0 {
            return;
        }
        let slot = &mut self.0[j as usize];
        *slot = slot.checked_sub(n).expect("bin count underflow");
        self.trim();
    }

    pub fn trim(&mut self) {
        while self.0.last() == Some(&0) {
            self.0.pop();
        }
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// One past the highest occupied bin.
    pub fn extent(&self) -> u64 {
        self.0.len() as u64
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.0.iter().enumerate().map(|(j, &c)| (j as u64, c))
    }
}

/// `lambda p_0 + sum_j p_j x_j`: the expected number of senders at the next
/// step. With `p_0 = 1` and bin 0 empty this is `lambda + sum_{j>=1} p_j x_j`.
pub fn noise(bins: &BinCounts, seq: &SendSequence, lambda: f64) -> f64 {
    lambda * seq.eval(0) + bins.iter().filter(|&(_, c)| c > 0).map(|(j, c)| c as f64 * seq.eval(j)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackoffState {
    pub t: u64,
    pub bins: BinCounts,
    pub births: u64,
    pub escapes: u64,
    pub empty_steps: u64,
    pub last_empty: Option<u64>,
}

impl BackoffState {
    pub fn empty() -> Self {
        Self { t: 0, bins: BinCounts::default(), births: 0, escapes: 0, empty_steps: 0, last_empty: Some(0) }
    }

    pub fn from_bins(bins: BinCounts) -> Self {
        let mut s = Self::empty();
        s.bins = bins;
        s.bins.trim();
        if s.bins.total() > 0 {
            s.last_empty = None;
        }
        s
    }

    pub fn backlog(&self) -> u64 {
        self.bins.total()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    pub t: u64,
    pub births: u64,
    /// Senders per bin, indexed like the pre-move bins.
    pub senders: Vec<u64>,
    pub total_senders: u64,
    /// Bin of the escaping ball.
    pub escaped_from: Option<u64>,
}

impl StepEvents {
    pub fn escaped(&self) -> bool {
        self.escaped_from.is_some()
    }
}

/// Draws senders for every bin of `bins` (after births joined bin 0).
fn draw_senders(bins: &BinCounts, seq: &SendSequence, t: u64, draws: &mut impl DrawSource) -> Vec<u64> {
    bins.iter()
        .map(|(j, c)| draws.senders(t, j, SenderClass::Primary, c, seq.eval(j)))
        .collect()
}

/// Applies part (iii) to `bins` given per-bin sender counts. Returns the bin
/// of the escaping ball, if any.
pub(crate) fn resolve(bins: &mut BinCounts, senders: &[u64]) -> Option<u64> {
    let total: u64 = senders.iter().sum();
    if total == 1 {
        let j = senders.iter().position(|&s| s == 1).unwrap() as u64;
        bins.sub(j, 1);
        return Some(j);
    }
    if total >= 2 {
        for (j, &s) in senders.iter().enumerate().rev() {
            if s > 0 {
                bins.sub(j as u64, s);
                bins.add(j as u64 + 1, s);
            }
        }
    }
    None
}

pub fn step_backoff(
    state: &mut BackoffState,
    seq: &SendSequence,
    lambda: f64,
    draws: &mut impl DrawSource,
) -> StepEvents {
    let t = state.t + 1;
    let births = draws.births(t, lambda);
    state.bins.add(0, births);
    let senders = draw_senders(&state.bins, seq, t, draws);
    let total_senders = senders.iter().sum();
    let escaped_from = resolve(&mut state.bins, &senders);
    state.t = t;
    state.births += births;
    state.escapes += u64::from(escaped_from.is_some());
    if state.bins.total() == 0 {
        state.empty_steps += 1;
        state.last_empty = Some(t);
    }
    StepEvents { t, births, senders, total_senders, escaped_from }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub backlog: u64,
    /// Noise of the state after the step.
    pub noise: f64,
    pub senders: u64,
    pub escaped: bool,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub births: u64,
    pub escapes: u64,
    /// Escapes per step.
    pub success_rate: f64,
    pub final_backlog: u64,
    pub empty_steps: u64,
    pub last_empty: Option<u64>,
    /// Least-squares slope of backlog against time over the recorded steps.
    pub backlog_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub lambda: f64,
    pub stride: u64,
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

impl RunLog {
    /// Record at time `t`, if it was kept.
    pub fn at(&self, t: u64) -> Option<&StepRecord> {
        if self.stride == 0 || t % self.stride != 0 {
            return None;
        }
        self.records.get((t / self.stride) as usize - 1).filter(|r| r.t == t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObserverConfig {
    /// Keep one record every `stride` steps; 0 keeps only the summary.
    pub stride: u64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

pub fn run_backoff(seq: &SendSequence, lambda: f64, steps: u64, seed: u64, obs: ObserverConfig) -> RunLog {
    let mut draws = StreamDraws::new(RngStream::new(seed).split("backoff"));
    run_backoff_with(seq, lambda, steps, seed, obs, &mut draws)
}

pub fn run_backoff_with(
    seq: &SendSequence,
    lambda: f64,
    steps: u64,
    seed: u64,
    obs: ObserverConfig,
    draws: &mut impl DrawSource,
) -> RunLog {
    assert!(steps >= 1);
    let mut state = BackoffState::empty();
    let mut records = Vec::new();
    for _ in 0..steps {
        let ev = step_backoff(&mut state, seq, lambda, draws);
        if obs.stride > 0 && ev.t % obs.stride == 0 {
            records.push(StepRecord {
                t: ev.t,
                backlog: state.backlog(),
                noise: noise(&state.bins, seq, lambda),
                senders: ev.total_senders,
                escaped: ev.escaped(),
                empty: state.backlog() == 0,
            });
        }
    }
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.t as f64, r.backlog as f64)).collect();
    let summary = RunSummary {
        steps,
        births: state.births,
        escapes: state.escapes,
        success_rate: state.escapes as f64 / steps as f64,
        final_backlog: state.backlog(),
        empty_steps: state.empty_steps,
        last_empty: state.last_empty,
        backlog_drift: slope(&pts),
    };
    RunLog { seed, lambda, stride: obs.stride, records, summary }
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// A backoff process with general `p_0` run alongside the process with
/// `p_0 = 1` and arrival rate `lambda p_0`, coupled so that the newborns of
/// the second are the newborns of the first that send immediately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPair {
    pub t: u64,
    /// Balls present in both processes, per bin.
    pub shared: BinCounts,
    /// Balls present only in the original process, per bin.
    pub original_only: BinCounts,
    pub original_escapes: u64,
    pub normalized_escapes: u64,
}

impl NormalizedPair {
    pub fn new() -> Self {
        Self {
            t: 0,
            shared: BinCounts::default(),
            original_only: BinCounts::default(),
            original_escapes: 0,
            normalized_escapes: 0,
        }
    }

    pub fn original(&self) -> BinCounts {
        let n = self.shared.extent().max(self.original_only.extent());
        let mut v = BinCounts((0..n).map(|j| self.shared.get(j) + self.original_only.get(j)).collect());
        v.trim();
        v
    }

    pub fn normalized(&self) -> &BinCounts {
        &self.shared
    }
}

impl Default for NormalizedPair {
    fn default() -> Self {
        Self::new()
    }
}

/// One coupled step. The original process consumes `draws` exactly as
/// [`step_backoff`] would; the split of its senders between the two
/// populations uses hypergeometric draws from `split`.
pub fn step_normalized_pair(
    pair: &mut NormalizedPair,
    seq: &SendSequence,
    lambda: f64,
    draws: &mut impl DrawSource,
    split: &RngStream,
) {
    let t = pair.t + 1;
    let births = draws.births(t, lambda);
    let retained0 = pair.original_only.get(0);
    debug_assert_eq!(pair.shared.get(0), 0);
    let extent = pair.shared.extent().max(pair.original_only.extent()).max(1);
    let mut shared_send = vec![0u64; extent as usize];
    let mut only_send = vec![0u64; extent as usize];
    let step_split = split.at(t);
    for j in 0..extent {
        let (s, o) = if j == 0 { (births, retained0) } else { (pair.shared.get(j), pair.original_only.get(j)) };
        let total = draws.senders(t, j, SenderClass::Primary, s + o, seq.eval(j));
        let from_s = step_split.at(j).draw_hypergeometric(s + o, s, total);
        shared_send[j as usize] = from_s;
        only_send[j as usize] = total - from_s;
    }
    // Newborns that did not send stay in bin 0 of the original process only.
    pair.original_only.add(0, births - shared_send[0]);
    pair.shared.add(0, shared_send[0]);

    let all: Vec<u64> = shared_send.iter().zip(&only_send).map(|(a, b)| a + b).collect();
    let total_all: u64 = all.iter().sum();
    let total_shared: u64 = shared_send.iter().sum();

    match (total_shared, total_all) {
        (s, _) if s >= 2 => {
            move_up(&mut pair.shared, &shared_send);
            move_up(&mut pair.original_only, &only_send);
        }
        (1, 1) => {
            let j = shared_send.iter().position(|&s| s == 1).unwrap() as u64;
            pair.shared.sub(j, 1);
            pair.normalized_escapes += 1;
            pair.original_escapes += 1;
        }
        (1, _) => {
            // Escapes the normalized process but collides in the original one.
            let j = shared_send.iter().position(|&s| s == 1).unwrap() as u64;
            pair.shared.sub(j, 1);
            pair.normalized_escapes += 1;
            move_up(&mut pair.original_only, &only_send);
            pair.original_only.add(j + 1, 1);
        }
        (_, 1) => {
            let j = only_send.iter().position(|&s| s == 1).unwrap() as u64;
            pair.original_only.sub(j, 1);
            pair.original_escapes += 1;
        }
        (_, a) if a >= 2 => move_up(&mut pair.original_only, &only_send),
        _ => {}
    }
    pair.t = t;
}

pub(crate) fn move_up(bins: &mut BinCounts, senders: &[u64]) {
    for (j, &s) in senders.iter().enumerate().rev() {
        if s > 0 {
            bins.sub(j as u64, s);
            bins.add(j as u64 + 1, s);
        }
    }
}

#[cfg(test)]
pub(crate) mod forced {
    use super::*;
    use std::collections::HashMap;

    /// Scripted draws; anything not scripted is zero.
    #[derive(Default)]
    pub struct ForcedDraws {
        pub births: HashMap<u64, u64>,
        pub senders: HashMap<(u64, u64, bool), u64>,
    }

    impl ForcedDraws {
        pub fn birth(mut self, t: u64, n: u64) -> Self {
            self.births.insert(t, n);
            self
        }
        pub fn send(mut self, t: u64, j: u64, n: u64) -> Self {
            self.senders.insert((t, j, true), n);
            self
        }
        pub fn send_secondary(mut self, t: u64, j: u64, n: u64) -> Self {
            self.senders.insert((t, j, false), n);
            self
        }
    }

    impl DrawSource for ForcedDraws {
        fn births(&mut self, t: u64, _mean: f64) -> u64 {
            self.births.get(&t).copied().unwrap_or(0)
        }
        fn senders(&mut self, t: u64, bin: u64, class: SenderClass, n: u64, _p: f64) -> u64 {
            let key = (t, bin, class == SenderClass::Primary);
            self.senders.get(&key).copied().unwrap_or(0).min(n)
        }
    }
}
