//! Externally-jammed processes: the dynamics of the backoff process with
//! escapes switched off, started from the stationary Poisson(`lambda/p_j`)
//! bins. Every ball is stuck or unstuck. Stuck balls are exactly the balls of
//! the coupled backoff process.
//!
//! Unstuck balls are only tracked in bins `1..=j_obs`. Balls only move up and
//! unstuck balls never influence stuck ones, so dropping them above the cap is
//! an exact truncation for every observable on bins `<= j_obs`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backoff::{move_up, BinCounts, DrawSource, SenderClass, StreamDraws};
use crate::blocks::{BlockError, BlockTable};
use crate::engine::RngStream;
use crate::sequences::SendSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JammedError {
    #[error("bin {bin} is above the observation cap {j_obs}")]
    AboveCap { bin: u64, j_obs: u64 },
    #[error("the externally-jammed process needs p_0 = 1, got {0}")]
    NeedsUnitP0(f64),
    #[error("run covers t <= {covered}, requested t = {requested}")]
    OutOfRun { covered: u64, requested: u64 },
    #[error(transparent)]
    Table(#[from] BlockError),
}

/// `lambda + sum_{j>=1} p_j x_j`.
pub fn stuck_noise(stuck: &BinCounts, seq: &SendSequence, lambda: f64) -> f64 {
    lambda + stuck.iter().filter(|&(j, c)| j >= 1 && c > 0).map(|(j, c)| c as f64 * seq.eval(j)).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JammedState {
    pub t: u64,
    pub lambda: f64,
    pub j_obs: u64,
    pub stuck: BinCounts,
    /// Unstuck counts for bins `<= j_obs`.
    pub unstuck: BinCounts,
    pub unsticks: u64,
}

impl JammedState {
    /// Bin `j` gets Poisson(`lambda/p_j`) unstuck balls for `1 <= j <= j_obs`;
    /// draw `j` comes from `init.at(j)`.
    pub fn init(seq: &SendSequence, lambda: f64, j_obs: u64, init: &RngStream) -> Result<Self, JammedError> {
        let p0 = seq.eval(0);
        if p0 != 1.0 {
            return Err(JammedError::NeedsUnitP0(p0));
        }
        assert!(j_obs >= 1);
        let mut unstuck = BinCounts::default();
        for j in 1..=j_obs {
            unstuck.add(j, init.at(j).draw_poisson(lambda / seq.eval(j)));
        }
        Ok(Self { t: 0, lambda, j_obs, stuck: BinCounts::default(), unstuck, unsticks: 0 })
    }

    pub fn empty(lambda: f64, j_obs: u64) -> Self {
        Self { t: 0, lambda, j_obs, stuck: BinCounts::default(), unstuck: BinCounts::default(), unsticks: 0 }
    }

    pub fn stuck_at(&self, j: u64) -> u64 {
        self.stuck.get(j)
    }

    pub fn unstuck_at(&self, j: u64) -> Result<u64, JammedError> {
        self.check_cap(j)?;
        Ok(self.unstuck.get(j))
    }

    pub fn total_at(&self, j: u64) -> Result<u64, JammedError> {
        Ok(self.unstuck_at(j)? + self.stuck.get(j))
    }

    fn check_cap(&self, j: u64) -> Result<(), JammedError> {
        if j > self.j_obs {
            Err(JammedError::AboveCap { bin: j, j_obs: self.j_obs })
        } else {
            Ok(())
        }
    }

    fn truncate(&mut self) {
        let cap = self.j_obs as usize + 1;
        if self.unstuck.0.len() > cap {
            self.unstuck.0.truncate(cap);
            self.unstuck.trim();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JammedStepEvents {
    pub t: u64,
    pub births: u64,
    /// Stuck senders per pre-move bin (newborns in bin 0).
    pub stuck_senders: Vec<u64>,
    pub unstuck_senders: Vec<u64>,
    /// Destination bin of the ball that became unstuck.
    pub unstick_to: Option<u64>,
}

impl JammedStepEvents {
    pub fn total_stuck_senders(&self) -> u64 {
        self.stuck_senders.iter().sum()
    }
}

/// Births, sends and upward moves of one step, without any state change
/// between stuck and unstuck.
pub(crate) fn advance(state: &mut JammedState, seq: &SendSequence, rate: f64, t: u64, draws: &mut impl DrawSource) -> (u64, Vec<u64>, Vec<u64>) {
    let births = draws.births(t, rate);
    state.stuck.add(0, births);
    let stuck_senders: Vec<u64> =
        state.stuck.iter().map(|(j, c)| draws.senders(t, j, SenderClass::Primary, c, seq.eval(j))).collect();
    let unstuck_senders: Vec<u64> =
        state.unstuck.iter().map(|(j, c)| draws.senders(t, j, SenderClass::Secondary, c, seq.eval(j))).collect();
    move_up(&mut state.stuck, &stuck_senders);
    move_up(&mut state.unstuck, &unstuck_senders);
    state.truncate();
    state.t = t;
    (births, stuck_senders, unstuck_senders)
}

/// Moves one stuck ball in bin `j` to the unstuck population.
fn unstick_one(state: &mut JammedState, j: u64) {
    state.stuck.sub(j, 1);
    if j <= state.j_obs {
        state.unstuck.add(j, 1);
    }
    state.unsticks += 1;
}

pub fn step_jammed(state: &mut JammedState, seq: &SendSequence, draws: &mut impl DrawSource) -> JammedStepEvents {
    let t = state.t + 1;
    let (births, stuck_senders, unstuck_senders) = advance(state, seq, state.lambda, t, draws);
    let total: u64 = stuck_senders.iter().sum();
    let unstick_to = if total == 1 {
        let j = stuck_senders.iter().position(|&s| s == 1).unwrap() as u64 + 1;
        unstick_one(state, j);
        Some(j)
    } else {
        None
    };
    JammedStepEvents { t, births, stuck_senders, unstuck_senders, unstick_to }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JammedRun {
    pub seed: u64,
    pub lambda: f64,
    pub j_obs: u64,
    pub events: Vec<JammedStepEvents>,
    /// `stuck[t]` for `t = 0..=steps` when recorded.
    pub stuck: Vec<BinCounts>,
    pub final_state: JammedState,
}

/// Streams used by a single-stream run with `seed`: steps read
/// `jammed/step/..`, initial bins read `jammed/init/<j>`.
pub fn jammed_root(seed: u64) -> RngStream {
    RngStream::new(seed).split("jammed")
}

pub fn run_jammed(
    seq: &SendSequence,
    lambda: f64,
    j_obs: u64,
    steps: u64,
    seed: u64,
    record_stuck: bool,
) -> Result<JammedRun, JammedError> {
    let root = jammed_root(seed);
    let mut state = JammedState::init(seq, lambda, j_obs, &root.split("init"))?;
    let mut draws = StreamDraws::new(root.clone());
    let mut events = Vec::with_capacity(steps as usize);
    let mut stuck = Vec::new();
    if record_stuck {
        stuck.push(state.stuck.clone());
    }
    for _ in 0..steps {
        events.push(step_jammed(&mut state, seq, &mut draws));
        if record_stuck {
            stuck.push(state.stuck.clone());
        }
    }
    Ok(JammedRun { seed, lambda, j_obs, events, stuck, final_state: state })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackoffView {
    pub t: u64,
    pub bins: BinCounts,
    pub escapes: u64,
}

/// Replays the event log of a jammed run into the coupled backoff process:
/// bin `j` of the view at time `t` is the stuck count of bin `j`, and every
/// unstick is an escape.
pub fn derive_backoff_view(events: &[JammedStepEvents]) -> Vec<BackoffView> {
    let mut bins = BinCounts::default();
    let mut escapes = 0;
    let mut out = Vec::with_capacity(events.len() + 1);
    out.push(BackoffView { t: 0, bins: bins.clone(), escapes });
    for ev in events {
        bins.add(0, ev.births);
        move_up(&mut bins, &ev.stuck_senders);
        if let Some(j) = ev.unstick_to {
            bins.sub(j, 1);
            escapes += 1;
        }
        out.push(BackoffView { t: ev.t, bins: bins.clone(), escapes });
    }
    out
}

// ---------------------------------------------------------------------------
// Two-stream process.

pub const STREAM_LABELS: [&str; 2] = ["A", "B"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamState {
    pub t: u64,
    /// Total arrival rate; each stream receives half of it.
    pub lambda: f64,
    pub streams: [JammedState; 2],
}

impl TwoStreamState {
    pub fn init(seq: &SendSequence, lambda: f64, j_obs: u64, root: &RngStream) -> Result<Self, JammedError> {
        let a = JammedState::init(seq, lambda / 2.0, j_obs, &root.split("A").split("init"))?;
        let b = JammedState::init(seq, lambda / 2.0, j_obs, &root.split("B").split("init"))?;
        Ok(Self { t: 0, lambda, streams: [a, b] })
    }

    pub fn unsticks(&self) -> u64 {
        self.streams[0].unsticks + self.streams[1].unsticks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamEvents {
    pub t: u64,
    pub births: [u64; 2],
    pub stuck_senders: [Vec<u64>; 2],
    /// Stream index and destination bin of the ball that became unstuck.
    pub unstick: Option<(usize, u64)>,
}

/// Picks the `idx`-th stuck sender in bin order.
fn locate(senders: &[u64], mut idx: u64) -> u64 {
    for (j, &s) in senders.iter().enumerate() {
        if idx < s {
            return j as u64;
        }
        idx -= s;
    }
    unreachable!("index beyond sender count")
}

/// One step of both streams on a shared clock. If exactly one stream has
/// stuck senders, a uniformly chosen one of them (drawn from
/// `choice.at(t)`) becomes unstuck.
pub fn step_two_stream(
    state: &mut TwoStreamState,
    seq: &SendSequence,
    draws: &mut [StreamDraws; 2],
    choice: &RngStream,
) -> TwoStreamEvents {
    step_two_stream_with(state, seq, draws, |t, n| choice.at(t).draw_index(n))
}

pub fn step_two_stream_with<D: DrawSource>(
    state: &mut TwoStreamState,
    seq: &SendSequence,
    draws: &mut [D; 2],
    mut choose: impl FnMut(u64, u64) -> u64,
) -> TwoStreamEvents {
    let t = state.t + 1;
    let rate = state.lambda / 2.0;
    let [da, db] = draws;
    let (ba, sa, _) = advance(&mut state.streams[0], seq, rate, t, da);
    let (bb, sb, _) = advance(&mut state.streams[1], seq, rate, t, db);
    let ka: u64 = sa.iter().sum();
    let kb: u64 = sb.iter().sum();
    let unstick = match (ka > 0, kb > 0) {
        (true, false) => Some((0, ka, &sa)),
        (false, true) => Some((1, kb, &sb)),
        _ => None,
    }
    .map(|(c, k, senders)| {
        let j = locate(senders, choose(t, k)) + 1;
        unstick_one(&mut state.streams[c], j);
        (c, j)
    });
    state.t = t;
    TwoStreamEvents { t, births: [ba, bb], stuck_senders: [sa, sb], unstick }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamRun {
    pub seed: u64,
    pub lambda: f64,
    pub j_obs: u64,
    /// `stuck[t][c]` for `t = 0..=steps`.
    pub stuck: Vec<[BinCounts; 2]>,
    pub unsticks: Vec<Option<(usize, u64)>>,
    pub final_state: TwoStreamState,
}

pub fn two_stream_root(seed: u64) -> RngStream {
    RngStream::new(seed).split("two-stream")
}

pub fn two_stream_draws(root: &RngStream) -> [StreamDraws; 2] {
    [StreamDraws::new(root.split("A")), StreamDraws::new(root.split("B"))]
}

pub fn run_two_stream(
    seq: &SendSequence,
    lambda: f64,
    j_obs: u64,
    steps: u64,
    seed: u64,
) -> Result<TwoStreamRun, JammedError> {
    let root = two_stream_root(seed);
    let mut state = TwoStreamState::init(seq, lambda, j_obs, &root)?;
    let mut draws = two_stream_draws(&root);
    let choice = root.split("unstick-choice");
    let mut stuck = Vec::with_capacity(steps as usize + 1);
    let mut unsticks = Vec::with_capacity(steps as usize);
    stuck.push([state.streams[0].stuck.clone(), state.streams[1].stuck.clone()]);
    for _ in 0..steps {
        let ev = step_two_stream(&mut state, seq, &mut draws, &choice);
        unsticks.push(ev.unstick);
        stuck.push([state.streams[0].stuck.clone(), state.streams[1].stuck.clone()]);
    }
    Ok(TwoStreamRun { seed, lambda, j_obs, stuck, unsticks, final_state: state })
}

/// Least `t` in `1..=horizon` at which both streams hold at least `c_init`
/// stuck balls in bin `j_min`.
pub fn detect_e_init(run: &TwoStreamRun, j_min: u64, c_init: u64) -> Option<u64> {
    run.stuck
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, s)| s[0].get(j_min) >= c_init && s[1].get(j_min) >= c_init)
        .map(|(t, _)| t as u64)
}

fn stuck_at_time<'a>(run: &'a TwoStreamRun, t: u64) -> Result<&'a [BinCounts; 2], JammedError> {
    run.stuck.get(t as usize).ok_or(JammedError::OutOfRun { covered: run.stuck.len() as u64 - 1, requested: t })
}

/// Whether each stream is `(C, t0)`-jammed for `tau`:
/// `f(stuckvect(C, t0 + tau - 1)) >= zeta |bins(tau - 1)|`.
pub fn jam_predicate(
    run: &TwoStreamRun,
    seq: &SendSequence,
    table: &BlockTable,
    t0: u64,
    tau: u64,
) -> Result<[bool; 2], JammedError> {
    assert!(tau >= 1);
    let s = stuck_at_time(run, t0 + tau - 1)?;
    let need = table.zeta * table.bins_len(u128::from(tau - 1))? as f64;
    Ok([
        stuck_noise(&s[0], seq, run.lambda) >= need,
        stuck_noise(&s[1], seq, run.lambda) >= need,
    ])
}

/// `E_jam(C, t0, tau)` for both streams: jammed for every `tau' <= tau`.
pub fn e_jam(run: &TwoStreamRun, seq: &SendSequence, table: &BlockTable, t0: u64, tau: u64) -> Result<[bool; 2], JammedError> {
    let mut out = [true, true];
    for tp in 1..=tau {
        let j = jam_predicate(run, seq, table, t0, tp)?;
        out[0] &= j[0];
        out[1] &= j[1];
        if !out[0] && !out[1] {
            break;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Coupling of a rate-lambda process with the two-stream process.

/// Per-bin classes of one stream's balls in the coupled pair, indexed by
/// `(stuck in Y, stuck in T)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoupledClasses {
    pub both_stuck: BinCounts,
    pub y_stuck_t_unstuck: BinCounts,
    pub both_unstuck: BinCounts,
    /// Must stay empty: unstuck in Y but stuck in T.
    pub y_unstuck_t_stuck: BinCounts,
}

impl CoupledClasses {
    pub fn t_stuck(&self, j: u64) -> u64 {
        self.both_stuck.get(j) + self.y_unstuck_t_stuck.get(j)
    }
    pub fn t_unstuck(&self, j: u64) -> u64 {
        self.y_stuck_t_unstuck.get(j) + self.both_unstuck.get(j)
    }
    pub fn y_stuck(&self, j: u64) -> u64 {
        self.both_stuck.get(j) + self.y_stuck_t_unstuck.get(j)
    }
    pub fn y_unstuck(&self, j: u64) -> u64 {
        self.both_unstuck.get(j) + self.y_unstuck_t_stuck.get(j)
    }
    fn extent(&self) -> u64 {
        self.both_stuck
            .extent()
            .max(self.y_stuck_t_unstuck.extent())
            .max(self.both_unstuck.extent())
            .max(self.y_unstuck_t_stuck.extent())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledYtState {
    pub t: u64,
    pub lambda: f64,
    pub j_obs: u64,
    pub streams: [CoupledClasses; 2],
    pub y_unsticks: u64,
    pub t_unsticks: u64,
    /// Steps at which a ball became unstuck in Y while stuck in T.
    pub violations: u64,
}

impl CoupledYtState {
    /// Same initial draws as [`TwoStreamState::init`]; all balls start unstuck in both.
    pub fn init(seq: &SendSequence, lambda: f64, j_obs: u64, root: &RngStream) -> Result<Self, JammedError> {
        let ts = TwoStreamState::init(seq, lambda, j_obs, root)?;
        let mk = |s: &JammedState| CoupledClasses { both_unstuck: s.unstuck.clone(), ..Default::default() };
        Ok(Self {
            t: 0,
            lambda,
            j_obs,
            streams: [mk(&ts.streams[0]), mk(&ts.streams[1])],
            y_unsticks: 0,
            t_unsticks: 0,
            violations: 0,
        })
    }

    /// `(stuck, unstuck)` of stream `c` as seen by the two-stream process.
    pub fn t_projection(&self, c: usize) -> (BinCounts, BinCounts) {
        let s = &self.streams[c];
        let n = s.extent();
        let mut stuck = BinCounts((0..n).map(|j| s.t_stuck(j)).collect());
        let mut unstuck = BinCounts((0..n.min(self.j_obs + 1)).map(|j| s.t_unstuck(j)).collect());
        stuck.trim();
        unstuck.trim();
        (stuck, unstuck)
    }

    /// Per-bin totals of both streams for `j <= j_obs`.
    pub fn bin_sizes(&self) -> Vec<u64> {
        (0..=self.j_obs)
            .map(|j| self.streams.iter().map(|s| s.t_stuck(j) + s.t_unstuck(j)).sum())
            .collect()
    }
}

#[derive(Default)]
struct ClassSenders {
    s: [Vec<u64>; 4],
}

pub fn step_coupled_yt(
    state: &mut CoupledYtState,
    seq: &SendSequence,
    draws: &mut [StreamDraws; 2],
    choice: &RngStream,
    split: &RngStream,
) {
    let t = state.t + 1;
    let rate = state.lambda / 2.0;
    let step_split = split.at(t);
    let mut senders: [ClassSenders; 2] = Default::default();
    for c in 0..2 {
        let d = &mut draws[c];
        let births = d.births(t, rate);
        let cls = &mut state.streams[c];
        cls.both_stuck.add(0, births);
        let n = cls.extent();
        let sp = step_split.split(STREAM_LABELS[c]);
        let out = &mut senders[c];
        for k in 0..4 {
            out.s[k] = vec![0; n as usize];
        }
        for j in 0..n {
            let p = seq.eval(j);
            let (c0, c3) = (cls.both_stuck.get(j), cls.y_unstuck_t_stuck.get(j));
            let ts = d.senders(t, j, SenderClass::Primary, c0 + c3, p);
            let s0 = sp.at(j).split("primary").draw_hypergeometric(c0 + c3, c0, ts);
            let (c1, c2) = (cls.y_stuck_t_unstuck.get(j), cls.both_unstuck.get(j));
            let tu = d.senders(t, j, SenderClass::Secondary, c1 + c2, p);
            let s1 = sp.at(j).split("secondary").draw_hypergeometric(c1 + c2, c1, tu);
            out.s[0][j as usize] = s0;
            out.s[3][j as usize] = ts - s0;
            out.s[1][j as usize] = s1;
            out.s[2][j as usize] = tu - s1;
        }
    }

    // Two-stream rule on T-stuck senders (classes 0 and 3).
    let k: [u64; 2] = std::array::from_fn(|c| senders[c].s[0].iter().chain(&senders[c].s[3]).sum());
    let t_choice = match (k[0] > 0, k[1] > 0) {
        (true, false) => Some(0),
        (false, true) => Some(1),
        _ => None,
    }
    .map(|c| {
        let mut idx = choice.at(t).draw_index(k[c]);
        let s = &senders[c].s;
        for j in 0..s[0].len() {
            let tot = s[0][j] + s[3][j];
            if idx < tot {
                let class = if idx < s[0][j] { 0 } else { 3 };
                return (c, j as u64, class);
            }
            idx -= tot;
        }
        unreachable!()
    });

    // Y rule on Y-stuck senders (classes 0 and 1) across both streams.
    let ky: u64 = senders.iter().map(|cs| cs.s[0].iter().chain(&cs.s[1]).sum::<u64>()).sum();
    let y_lone = (ky == 1).then(|| {
        for (c, cs) in senders.iter().enumerate() {
            for j in 0..cs.s[0].len() {
                if cs.s[0][j] == 1 {
                    return (c, j as u64, 0);
                }
                if cs.s[1][j] == 1 {
                    return (c, j as u64, 1);
                }
            }
        }
        unreachable!()
    });

    for c in 0..2 {
        let cls = &mut state.streams[c];
        let s = &senders[c].s;
        move_up(&mut cls.both_stuck, &s[0]);
        move_up(&mut cls.y_stuck_t_unstuck, &s[1]);
        move_up(&mut cls.both_unstuck, &s[2]);
        move_up(&mut cls.y_unstuck_t_stuck, &s[3]);
        let cap = state.j_obs as usize + 1;
        if cls.both_unstuck.0.len() > cap {
            cls.both_unstuck.0.truncate(cap);
            cls.both_unstuck.trim();
        }
    }
    if let Some((c, j, class)) = t_choice {
        let cls = &mut state.streams[c];
        if class == 0 {
            cls.both_stuck.sub(j + 1, 1);
            cls.y_stuck_t_unstuck.add(j + 1, 1);
        } else {
            cls.y_unstuck_t_stuck.sub(j + 1, 1);
            cls.both_unstuck.add(j + 1, 1);
        }
        state.t_unsticks += 1;
    }
    if let Some((c, j, class)) = y_lone {
        let cls = &mut state.streams[c];
        // A lone Y-stuck sender that T also chose now sits in class 1.
        let t_took_it = t_choice == Some((c, j, 0));
        if class == 1 || t_took_it {
            cls.y_stuck_t_unstuck.sub(j + 1, 1);
            cls.both_unstuck.add(j + 1, 1);
        } else {
            cls.both_stuck.sub(j + 1, 1);
            cls.y_unstuck_t_stuck.add(j + 1, 1);
            state.violations += 1;
        }
        state.y_unsticks += 1;
    }
    state.t = t;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingYtReport {
    pub seed: u64,
    pub steps: u64,
    /// Steps where the coupled pair's two-stream projection differs from the standalone run.
    pub projection_mismatches: u64,
    /// Steps where a bin size of the rate-lambda view differs from the two-stream bin size.
    pub bin_size_mismatches: u64,
    /// Steps where some bin had more Y-unstuck than T-unstuck balls.
    pub unstuck_inclusion_failures: u64,
    /// Steps where cumulative Y unsticks exceeded cumulative T unsticks.
    pub cumulative_failures: u64,
    pub violations: u64,
    pub y_unsticks: u64,
    pub t_unsticks: u64,
}

impl CouplingYtReport {
    pub fn pass(&self) -> bool {
        self.projection_mismatches == 0
            && self.bin_size_mismatches == 0
            && self.unstuck_inclusion_failures == 0
            && self.cumulative_failures == 0
            && self.violations == 0
    }
}

/// Runs the coupled pair next to a standalone two-stream run on the same
/// streams and checks the coupling properties at every step.
pub fn verify_coupling_yt(
    seq: &SendSequence,
    lambda: f64,
    j_obs: u64,
    steps: u64,
    seed: u64,
) -> Result<CouplingYtReport, JammedError> {
    let root = two_stream_root(seed);
    let mut solo = TwoStreamState::init(seq, lambda, j_obs, &root)?;
    let mut pair = CoupledYtState::init(seq, lambda, j_obs, &root)?;
    let mut solo_draws = two_stream_draws(&root);
    let mut pair_draws = two_stream_draws(&root);
    let choice = root.split("unstick-choice");
    let split = root.split("coupling-split");
    let mut r = CouplingYtReport {
        seed,
        steps,
        projection_mismatches: 0,
        bin_size_mismatches: 0,
        unstuck_inclusion_failures: 0,
        cumulative_failures: 0,
        violations: 0,
        y_unsticks: 0,
        t_unsticks: 0,
    };
    for _ in 0..steps {
        step_two_stream(&mut solo, seq, &mut solo_draws, &choice);
        step_coupled_yt(&mut pair, seq, &mut pair_draws, &choice, &split);
        let same = (0..2).all(|c| {
            let (s, u) = pair.t_projection(c);
            s == solo.streams[c].stuck && u == solo.streams[c].unstuck
        });
        r.projection_mismatches += u64::from(!same);
        let sizes_ok = (0..=j_obs).all(|j| {
            let t_size: u64 = solo.streams.iter().map(|s| s.stuck_at(j) + s.unstuck.get(j)).sum();
            let y_size: u64 = pair.streams.iter().map(|s| s.y_stuck(j) + s.y_unstuck(j)).sum();
            t_size == y_size
        });
        r.bin_size_mismatches += u64::from(!sizes_ok);
        let incl_ok = (0..=j_obs).all(|j| {
            let yu: u64 = pair.streams.iter().map(|s| s.y_unstuck(j)).sum();
            let tu: u64 = pair.streams.iter().map(|s| s.t_unstuck(j)).sum();
            yu <= tu
        });
        r.unstuck_inclusion_failures += u64::from(!incl_ok);
        r.cumulative_failures += u64::from(pair.y_unsticks > pair.t_unsticks);
    }
    r.violations = pair.violations;
    r.y_unsticks = pair.y_unsticks;
    r.t_unsticks = pair.t_unsticks;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingXyReport {
    pub seed: u64,
    pub steps: u64,
    pub j_obs: u64,
    /// `(t, bin)` pairs where the view and the standalone backoff run differ.
    pub mismatches: u64,
    pub escape_mismatches: u64,
    pub unsticks: u64,
}

impl CouplingXyReport {
    pub fn pass(&self) -> bool {
        self.mismatches == 0 && self.escape_mismatches == 0
    }
}

/// Runs a jammed process and a standalone backoff process on the same
/// labelled streams and compares the derived view with the backoff run
/// bin by bin at every step.
pub fn verify_coupling_xy(
    seq: &SendSequence,
    lambda: f64,
    j_obs: u64,
    steps: u64,
    seed: u64,
) -> Result<CouplingXyReport, JammedError> {
    let run = run_jammed(seq, lambda, j_obs, steps, seed, false)?;
    let view = derive_backoff_view(&run.events);
    let mut x = crate::backoff::BackoffState::empty();
    let mut draws = StreamDraws::new(jammed_root(seed));
    let mut mismatches = 0;
    let mut escape_mismatches = 0;
    for v in &view[1..] {
        crate::backoff::step_backoff(&mut x, seq, lambda, &mut draws);
        let n = x.bins.extent().max(v.bins.extent()).max(j_obs + 1);
        mismatches += (0..n).filter(|&j| x.bins.get(j) != v.bins.get(j)).count() as u64;
        escape_mismatches += u64::from(x.escapes != v.escapes);
    }
    Ok(CouplingXyReport { seed, steps, j_obs, mismatches, escape_mismatches, unsticks: run.final_state.unsticks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backoff::forced::ForcedDraws;

    fn beb() -> SendSequence {
        SendSequence::binary_exponential()
    }

    #[test]
    fn zero_rate_init_is_empty() {
        let s = JammedState::init(&beb(), 0.0, 16, &RngStream::new(1)).unwrap();
        assert_eq!(s.unstuck.total(), 0);
        assert_eq!(s.stuck.total(), 0);
    }

    #[test]
    fn init_has_no_stuck_balls_and_rejects_p0() {
        let s = JammedState::init(&beb(), 0.5, 16, &RngStream::new(1)).unwrap();
        assert_eq!(s.stuck.total(), 0);
        let bad = beb().with_p0(0.5).unwrap();
        assert!(JammedState::init(&bad, 0.5, 16, &RngStream::new(1)).is_err());
    }

    #[test]
    fn init_means_match_lambda_over_p() {
        let seeds = 500u64;
        for j in [1u64, 3, 5] {
            let mean_true = 0.5 * 2f64.powi(j as i32);
            let xs: Vec<f64> = (0..seeds)
                .map(|s| JammedState::init(&beb(), 0.5, 8, &RngStream::new(s)).unwrap().unstuck.get(j) as f64)
                .collect();
            let m = xs.iter().sum::<f64>() / seeds as f64;
            assert!((m - mean_true).abs() <= 4.0 * (mean_true / seeds as f64).sqrt(), "j={j}: {m}");
        }
    }

    #[test]
    fn lone_stuck_sender_unsticks() {
        let mut s = JammedState::empty(0.5, 8);
        s.stuck = BinCounts(vec![0, 0, 1]);
        let ev = step_jammed(&mut s, &beb(), &mut ForcedDraws::default().send(1, 2, 1));
        assert_eq!(ev.unstick_to, Some(3));
        assert_eq!(s.stuck.total(), 0);
        assert_eq!(s.unstuck.get(3), 1);
    }

    #[test]
    fn two_stuck_senders_stay_stuck() {
        let mut s = JammedState::empty(0.5, 8);
        s.stuck = BinCounts(vec![0, 1, 1]);
        let ev = step_jammed(&mut s, &beb(), &mut ForcedDraws::default().send(1, 1, 1).send(1, 2, 1));
        assert_eq!(ev.unstick_to, None);
        assert_eq!(s.stuck, BinCounts(vec![0, 0, 1, 1]));
    }

    #[test]
    fn unstuck_senders_do_not_unstick_anyone() {
        let mut s = JammedState::empty(0.5, 8);
        s.stuck = BinCounts(vec![0, 1]);
        s.unstuck = BinCounts(vec![0, 3]);
        let ev = step_jammed(&mut s, &beb(), &mut ForcedDraws::default().send(1, 1, 1).send_secondary(1, 1, 2));
        assert_eq!(ev.unstick_to, Some(2));
        assert_eq!(s.unstuck, BinCounts(vec![0, 1, 3]));
    }

    #[test]
    fn cap_is_enforced() {
        let s = JammedState::empty(0.5, 4);
        assert!(matches!(s.unstuck_at(5), Err(JammedError::AboveCap { .. })));
        assert_eq!(s.unstuck_at(4).unwrap(), 0);
    }

    #[test]
    fn view_at_zero_is_empty_and_escapes_are_unsticks() {
        let run = run_jammed(&beb(), 0.5, 16, 500, 4, false).unwrap();
        let view = derive_backoff_view(&run.events);
        assert_eq!(view[0].bins.total(), 0);
        assert_eq!(view.last().unwrap().escapes, run.final_state.unsticks);
        assert_eq!(view.last().unwrap().bins, run.final_state.stuck);
    }

    #[test]
    fn coupling_xy_exact_small() {
        for seed in 0..3 {
            let r = verify_coupling_xy(&beb(), 0.5, 32, 2000, seed).unwrap();
            assert!(r.pass(), "{r:?}");
        }
    }

    #[test]
    fn two_stream_case_one_and_two() {
        let seq = beb();
        let mk = || {
            let mut st = TwoStreamState {
                t: 0,
                lambda: 0.5,
                streams: [JammedState::empty(0.25, 8), JammedState::empty(0.25, 8)],
            };
            st.streams[0].stuck = BinCounts(vec![0, 1]);
            st.streams[1].stuck = BinCounts(vec![0, 1]);
            st
        };
        // A sends alone: its ball unsticks.
        let mut st = mk();
        let mut d = [ForcedDraws::default().send(1, 1, 1), ForcedDraws::default()];
        let ev = step_two_stream_with(&mut st, &seq, &mut d, |_, _| 0);
        assert_eq!(ev.unstick, Some((0, 2)));
        assert_eq!(st.streams[0].unstuck.get(2), 1);
        // Both send: nothing unsticks.
        let mut st = mk();
        let mut d = [ForcedDraws::default().send(1, 1, 1), ForcedDraws::default().send(1, 1, 1)];
        let ev = step_two_stream_with(&mut st, &seq, &mut d, |_, _| 0);
        assert_eq!(ev.unstick, None);
        assert_eq!(st.unsticks(), 0);
        // Several senders in one stream only: one of them unsticks.
        let mut st = mk();
        st.streams[1].stuck = BinCounts(vec![0, 2, 1]);
        let mut d = [ForcedDraws::default(), ForcedDraws::default().send(1, 1, 2).send(1, 2, 1)];
        let ev = step_two_stream_with(&mut st, &seq, &mut d, |_, n| {
            assert_eq!(n, 3);
            2
        });
        assert_eq!(ev.unstick, Some((1, 3)));
    }

    #[test]
    fn coupling_yt_small() {
        for seed in 0..3 {
            let r = verify_coupling_yt(&beb(), 0.5, 32, 500, seed).unwrap();
            assert!(r.pass(), "{r:?}");
            assert!(r.y_unsticks <= r.t_unsticks);
        }
    }

    #[test]
    fn e_init_thresholds() {
        let seq = SendSequence::constant(0.5).unwrap().with_p0(1.0).unwrap();
        let run = run_two_stream(&seq, 0.9, 8, 200, 1).unwrap();
        assert_eq!(detect_e_init(&run, 1, 0), Some(1));
        assert_eq!(detect_e_init(&run, 1, 1_000_000), None);
    }

    #[test]
    fn jam_predicate_trivial_cases() {
        use crate::blocks::{build_block_table, BlockConfig, BlockOverrides};
        let seq = SendSequence::constant(0.5).unwrap().with_p0(1.0).unwrap();
        let mk = |zeta: f64| {
            let cfg = BlockConfig {
                overrides: BlockOverrides {
                    kappa: Some(3),
                    i0: Some(1),
                    zeta: Some(zeta),
                    tau_init: Some(10),
                    c_init: Some(1),
                    ..Default::default()
                },
                max_block: 8,
                horizon: 100,
                sum_budget: 1000,
            };
            build_block_table(&seq, 0.9, 0.9, 0.5, &cfg).unwrap()
        };
        let empty = TwoStreamRun {
            seed: 0,
            lambda: 0.9,
            j_obs: 4,
            stuck: vec![[BinCounts::default(), BinCounts::default()]; 4],
            unsticks: vec![None; 3],
            final_state: TwoStreamState { t: 3, lambda: 0.9, streams: [JammedState::empty(0.45, 4), JammedState::empty(0.45, 4)] },
        };
        assert_eq!(jam_predicate(&empty, &seq, &mk(1.0), 1, 2).unwrap(), [false, false]);
        assert_eq!(e_jam(&empty, &seq, &mk(0.0), 1, 3).unwrap(), [true, true]);
        assert!(matches!(jam_predicate(&empty, &seq, &mk(0.0), 1, 10), Err(JammedError::OutOfRun { .. })));
    }
}
