//! Blocks of bins, their weights, and the time scales `tau_i`, `tau_init`,
//! `C_init` built on them.
//!
//! Block `B_i` spans bins `l(i)..=u(i)` with `u(i) = kappa^(i-1)`. Times are
//! `u128` and the table simply ends where a weight or a time would overflow;
//! lookups past the end report [`BlockError::TableExhausted`].
//!
//! The constants of the construction are astronomically large for any
//! realistic arrival rate, so each of them can be overridden with a
//! scaled-down value. Overrides are recorded in the table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequences::{kappa as kappa_of_eta, p_star_with_kappa, SendSequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("constants infeasible: {0}")]
    ConstantsInfeasible(String),
    #[error("table exhausted at tau = {tau} (last tabulated tau_i = {last})")]
    TableExhausted { tau: u128, last: u128 },
    #[error("invalid block configuration: {0}")]
    Invalid(String),
}

/// Scaled-down replacements for the constants of the construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i0: Option<u64>,
    /// Replaces `max(10^7/lambda^2, 20, (2 kappa/(1-nu))^4)` in the `tau_init` search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_init_floor: Option<u128>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_init: Option<u128>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_init: Option<u64>,
}

impl BlockOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    #[serde(default)]
    pub overrides: BlockOverrides,
    /// Largest block index to tabulate.
    #[serde(default = "default_max_block")]
    pub max_block: u64,
    /// Prefix length used for `j_min`, `j_0` and the suitability scan.
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    /// Largest number of terms summed explicitly for one block weight.
    #[serde(default = "default_sum_budget")]
    pub sum_budget: u64,
}

fn default_max_block() -> u64 {
    64
}
fn default_horizon() -> u64 {
    100_000
}
fn default_sum_budget() -> u64 {
    10_000_000
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            overrides: BlockOverrides::default(),
            max_block: default_max_block(),
            horizon: default_horizon(),
            sum_budget: default_sum_budget(),
        }
    }
}

impl BlockConfig {
    pub fn with_overrides(overrides: BlockOverrides) -> Self {
        Self { overrides, ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub lo: u64,
    pub hi: u64,
    /// `sum_{j in B_i} 1/p_j`
    pub weight: f64,
    pub weight_ceil: u128,
}

impl Block {
    pub fn len(&self) -> u64 {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, j: u64) -> bool {
        self.lo <= j && j <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTable {
    pub lambda: f64,
    pub eta: f64,
    pub nu: f64,
    pub kappa: u64,
    pub zeta: f64,
    pub p_star: f64,
    pub j_min: Option<u64>,
    pub j0: Option<u64>,
    pub i0: u64,
    /// `blocks[i - 1]` is `B_i`.
    pub blocks: Vec<Block>,
    /// `tau[i]` is `tau_i`, starting from `tau_0 = 0`.
    pub tau: Vec<u128>,
    pub q: u128,
    pub tau_init: u128,
    pub c_init: u64,
    pub overrides: BlockOverrides,
    pub horizon: u64,
}

/// `u(i) = kappa^(i-1)`, or `None` on overflow.
pub fn block_upper(kappa: u64, i: u64) -> Option<u64> {
    assert!(i >= 1);
    kappa.checked_pow(u32::try_from(i - 1).ok()?)
}

/// `(l(i), u(i))`.
pub fn block_range(kappa: u64, i: u64) -> Option<(u64, u64)> {
    let hi = block_upper(kappa, i)?;
    let lo = if i == 1 { 1 } else { block_upper(kappa, i - 1)? + 1 };
    Some((lo, hi))
}

/// Smallest `I` with `I >= log(4/c)/c` and `exp(I c) >= 4 I`, `c = zeta (kappa-1)/(16 kappa^2)`.
pub fn growth_threshold(zeta: f64, kappa: u64) -> Option<u64> {
    let k = kappa as f64;
    let c = zeta * (k - 1.0) / (16.0 * k * k);
    if c <= 0.0 {
        return None;
    }
    let mut i = ((4.0 / c).ln() / c).ceil().max(1.0) as u64;
    while (i as f64 * c).exp() < 4.0 * i as f64 {
        i += 1;
    }
    Some(i)
}

pub fn build_block_table(
    seq: &SendSequence,
    lambda: f64,
    eta: f64,
    nu: f64,
    config: &BlockConfig,
) -> Result<BlockTable, BlockError> {
    if seq.eval(0) != 1.0 {
        return Err(BlockError::Invalid("the block construction needs p_0 = 1".into()));
    }
    if !(lambda > 0.0 && eta > 0.0 && eta <= 1.0 && nu > 0.0 && nu < 1.0) {
        return Err(BlockError::Invalid(format!("lambda={lambda}, eta={eta}, nu={nu}")));
    }
    let ov = &config.overrides;
    let kappa = ov.kappa.unwrap_or_else(|| kappa_of_eta(eta));
    if kappa < 2 {
        return Err(BlockError::Invalid(format!("kappa = {kappa} < 2")));
    }
    let zeta = ov.zeta.unwrap_or(eta * lambda / 24.0);
    let p_star = p_star_with_kappa(lambda, eta, nu, kappa);
    let horizon = config.horizon;
    let j_min = seq.j_min(horizon);
    let ln_inv_nu = -nu.ln();
    let j0 = {
        let mut start = None;
        for j in (0..=horizon).rev() {
            if seq.ln_inv(j) < j as f64 * ln_inv_nu {
                start = Some(j);
            } else {
                break;
            }
        }
        start
    };

    let blocks = tabulate_blocks(seq, kappa, config.max_block, config.sum_budget);

    let i0 = match ov.i0 {
        Some(i0) => i0,
        None => search_i0(seq, lambda, eta, nu, kappa, zeta, p_star, j_min, horizon)?,
    };
    if i0 == 0 {
        return Err(BlockError::Invalid("I_0 must be positive".into()));
    }
    let tau = tabulate_tau(&blocks, kappa, i0);
    if (blocks.len() as u64) < i0 {
        return Err(BlockError::ConstantsInfeasible(format!(
            "I_0 = {i0} but only {} block weights are representable",
            blocks.len()
        )));
    }
    let q = blocks[..i0 as usize].iter().map(|b| b.weight_ceil).max().unwrap_or(0);

    let mut table = BlockTable {
        lambda,
        eta,
        nu,
        kappa,
        zeta,
        p_star,
        j_min,
        j0,
        i0,
        blocks,
        tau,
        q,
        tau_init: 0,
        c_init: 0,
        overrides: ov.clone(),
        horizon,
    };

    table.tau_init = match ov.tau_init {
        Some(t) => t,
        None => {
            let floor = match ov.tau_init_floor {
                Some(f) => f,
                None => {
                    let k = kappa as f64;
                    let b = (1e7 / (lambda * lambda)).max(20.0).max((2.0 * k / (1.0 - nu)).powi(4));
                    b.ceil() as u128
                }
            };
            let target = (i0 + 3).max(2 * i0 * (2 * q as u64 + 1));
            // I(tau) >= target  <=>  tau >= tau_{target - I_0 - 1}
            let idx = (target - i0 - 1) as usize;
            let needed = *table.tau.get(idx).ok_or_else(|| {
                BlockError::ConstantsInfeasible(format!(
                    "tau_init needs tau_{idx} but only {} times are representable",
                    table.tau.len()
                ))
            })?;
            floor.max(needed)
        }
    };

    table.c_init = match ov.c_init {
        Some(c) => c,
        None => {
            let jm = j_min.ok_or_else(|| {
                BlockError::ConstantsInfeasible("no j with p_j < 1 on the prefix".into())
            })?;
            let p = seq.eval(jm);
            let ti = table.tau_init as f64;
            let decay = (1.0 - p).powf(ti);
            let b_i0 = table.blocks[i0 as usize - 1].len() as f64;
            let bins_init = table.bins_of_tau(table.tau_init)?;
            let nbins = (bins_init.1 - bins_init.0 + 1) as f64;
            let v = (zeta * b_i0 / p)
                .max(12.0 * (100.0 * ti).ln() / decay)
                .max(2.0 * zeta * nbins / (p * decay))
                .ceil();
            if !v.is_finite() || v > u64::MAX as f64 {
                return Err(BlockError::ConstantsInfeasible(format!("C_init = {v} is not representable")));
            }
            v as u64
        }
    };
    Ok(table)
}

fn tabulate_blocks(seq: &SendSequence, kappa: u64, max_block: u64, budget: u64) -> Vec<Block> {
    let mut out = Vec::new();
    for i in 1..=max_block {
        let Some((lo, hi)) = block_range(kappa, i) else { break };
        let Some(weight) = seq.inverse_sum(lo, hi, budget) else { break };
        if !weight.is_finite() || weight >= u128::MAX as f64 {
            break;
        }
        out.push(Block { index: i, lo, hi, weight, weight_ceil: weight.ceil() as u128 });
    }
    out
}

/// `tau_i = kappa * T_{I_0+i}` where `T_m = sum_{k<=m} (m-k+1) ceil(W_k)`,
/// i.e. `T_m = T_{m-1} + S_m` with `S_m` the partial sums of `ceil(W_k)`.
fn tabulate_tau(blocks: &[Block], kappa: u64, i0: u64) -> Vec<u128> {
    let mut tau = vec![0u128];
    let mut s: u128 = 0;
    let mut t: u128 = 0;
    for (m, b) in blocks.iter().enumerate() {
        let m = m as u64 + 1;
        let next = s.checked_add(b.weight_ceil).and_then(|s2| t.checked_add(s2).map(|t2| (s2, t2)));
        let Some((s2, t2)) = next else { break };
        s = s2;
        t = t2;
        if m > i0 {
            match t.checked_mul(kappa as u128) {
                Some(v) => tau.push(v),
                None => break,
            }
        }
    }
    tau
}

#[allow(clippy::too_many_arguments)]
fn search_i0(
    seq: &SendSequence,
    lambda: f64,
    eta: f64,
    nu: f64,
    kappa: u64,
    zeta: f64,
    p_star: f64,
    j_min: Option<u64>,
    horizon: u64,
) -> Result<u64, BlockError> {
    let jm = j_min.ok_or_else(|| BlockError::ConstantsInfeasible("no j with p_j < 1 on the prefix".into()))?;
    let n0 = suitable_suffix_start(seq, eta, nu, p_star, horizon).ok_or_else(|| {
        BlockError::ConstantsInfeasible(format!(
            "suitability conditions fail at the horizon {horizon} (lambda={lambda})"
        ))
    })?;
    // least I with l(I) >= n0
    let mut by_suffix = 1u64;
    loop {
        let Some((lo, _)) = block_range(kappa, by_suffix) else {
            return Err(BlockError::ConstantsInfeasible("l(I) overflows before the suffix start".into()));
        };
        if lo >= n0 {
            break;
        }
        by_suffix += 1;
    }
    let mut by_fill = 1u64;
    loop {
        let Some((lo, hi)) = block_range(kappa, by_fill) else {
            return Err(BlockError::ConstantsInfeasible("zeta |B_I| < 4 for every representable block".into()));
        };
        if zeta * (hi - lo + 1) as f64 >= 4.0 {
            break;
        }
        by_fill += 1;
    }
    let by_growth = growth_threshold(zeta, kappa)
        .ok_or_else(|| BlockError::ConstantsInfeasible("zeta must be positive".into()))?;
    Ok(jm.max(by_suffix).max(by_fill).max(by_growth))
}

/// Least `n0` such that both suitability conditions hold for all `n` in `[n0, horizon]`.
fn suitable_suffix_start(seq: &SendSequence, eta: f64, nu: f64, p_star: f64, horizon: u64) -> Option<u64> {
    let ln_inv_nu = -nu.ln();
    let mut small = vec![0u64; horizon as usize + 1];
    for n in 1..=horizon as usize {
        small[n] = small[n - 1] + u64::from(seq.eval(n as u64) <= p_star);
    }
    let mut start = None;
    for n in (1..=horizon).rev() {
        let ok = small[n as usize] as f64 > eta * n as f64 && (n as f64) * ln_inv_nu > seq.ln_inv(n);
        if ok {
            start = Some(n);
        } else {
            break;
        }
    }
    start
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

impl BlockTable {
    pub fn block(&self, i: u64) -> Option<&Block> {
        self.blocks.get((i as usize).checked_sub(1)?)
    }

    /// Last tabulated `tau_i`; lookups need `tau` strictly below it.
    pub fn last_tau(&self) -> u128 {
        *self.tau.last().expect("tau_0 always present")
    }

    /// `I(tau)`: `I_0 + 1` at zero, else the `I` with `tau_{I-I_0-1} <= tau < tau_{I-I_0}`.
    pub fn i_of_tau(&self, tau: u128) -> Result<u64, BlockError> {
        if tau == 0 {
            return Ok(self.i0 + 1);
        }
        if tau >= self.last_tau() {
            return Err(BlockError::TableExhausted { tau, last: self.last_tau() });
        }
        let m = self.tau[1..].partition_point(|&t| t <= tau) as u64;
        Ok(self.i0 + 1 + m)
    }

    /// `bins(tau) = B_{I(tau)-1}` as `(l, u)`.
    pub fn bins_of_tau(&self, tau: u128) -> Result<(u64, u64), BlockError> {
        let i = self.i_of_tau(tau)? - 1;
        let b = self.block(i).ok_or(BlockError::TableExhausted { tau, last: self.last_tau() })?;
        Ok((b.lo, b.hi))
    }

    pub fn bins_len(&self, tau: u128) -> Result<u64, BlockError> {
        let (lo, hi) = self.bins_of_tau(tau)?;
        Ok(hi - lo + 1)
    }

    /// `kappa * sum_{k<=i} ceil(W_k)`, the Fill-set window for bins in `B_i`.
    pub fn fill_window(&self, i: u64) -> Option<u128> {
        let mut s: u128 = 0;
        for k in 1..=i {
            s = s.checked_add(self.block(k)?.weight_ceil)?;
        }
        s.checked_mul(self.kappa as u128)
    }

    /// Index of the block containing bin `j >= 1`.
    pub fn block_of_bin(&self, j: u64) -> u64 {
        assert!(j >= 1);
        let mut i = 1;
        let mut u = 1u64;
        while u < j {
            u = u.saturating_mul(self.kappa);
            i += 1;
        }
        i
    }

    /// `log(tau) / (2 kappa^2 log(1/nu))`.
    pub fn bins_lower_bound(&self, tau: u128) -> f64 {
        let k = self.kappa as f64;
        (tau as f64).ln() / (2.0 * k * k * (1.0 / self.nu).ln())
    }

    /// `|{j in B_i : p_j <= p_*}|`.
    pub fn small_count(&self, seq: &SendSequence, i: u64) -> Option<u64> {
        let b = self.block(i)?;
        Some((b.lo..=b.hi).filter(|&j| seq.eval(j) <= self.p_star).count() as u64)
    }

    /// Re-verifies every defining condition of `I_0`, `tau_init` and `C_init`
    /// by direct substitution. Overridden constants are checked too, so a
    /// scaled-down table typically reports failures.
    pub fn check_conditions(&self, seq: &SendSequence) -> Vec<ConditionCheck> {
        let mut out = Vec::new();
        let mut push = |name: &str, holds: bool, detail: String| {
            out.push(ConditionCheck { name: name.to_string(), holds, detail })
        };
        let i0 = self.i0;
        push(
            "I0 >= j_min",
            self.j_min.is_some_and(|j| i0 >= j),
            format!("I0={i0}, j_min={:?}", self.j_min),
        );
        let suffix = suitable_suffix_start(seq, self.eta, self.nu, self.p_star, self.horizon);
        let l_i0 = block_range(self.kappa, i0).map(|r| r.0);
        push(
            "suitability for all n >= l(I0)",
            matches!((suffix, l_i0), (Some(s), Some(l)) if l >= s),
            format!("l(I0)={l_i0:?}, suffix start={suffix:?}, horizon={}", self.horizon),
        );
        let b_i0 = block_range(self.kappa, i0).map(|(lo, hi)| hi - lo + 1).unwrap_or(0);
        push("zeta |B_I0| >= 4", self.zeta * b_i0 as f64 >= 4.0, format!("zeta={}, |B_I0|={b_i0}", self.zeta));
        let k = self.kappa as f64;
        let c = self.zeta * (k - 1.0) / (16.0 * k * k);
        let x = i0 as f64;
        push(
            "I0 >= log(4/c)/c and exp(I0 c) >= 4 I0",
            c > 0.0 && x >= (4.0 / c).ln() / c && (x * c).exp() >= 4.0 * x,
            format!("c={c}"),
        );
        let floor = (1e7 / (self.lambda * self.lambda)).max(20.0).max((2.0 * k / (1.0 - self.nu)).powi(4));
        push(
            "tau_init >= max(1e7/lambda^2, 20, (2 kappa/(1-nu))^4)",
            self.tau_init as f64 >= floor,
            format!("tau_init={}, bound={floor}", self.tau_init),
        );
        let target = (i0 + 3).max(2 * i0 * (2 * self.q as u64 + 1));
        let got = self.i_of_tau(self.tau_init);
        push(
            "I(tau_init) >= max(I0+3, 2 I0 (2Q+1))",
            matches!(got, Ok(i) if i >= target),
            format!("I(tau_init)={got:?}, target={target}"),
        );
        let c_formula = self.j_min.and_then(|jm| {
            let p = seq.eval(jm);
            let ti = self.tau_init as f64;
            let decay = (1.0 - p).powf(ti);
            let n = self.bins_len(self.tau_init).ok()? as f64;
            Some(
                (self.zeta * b_i0 as f64 / p)
                    .max(12.0 * (100.0 * ti).ln() / decay)
                    .max(2.0 * self.zeta * n / (p * decay))
                    .ceil(),
            )
        });
        push(
            "C_init = ceil(max(...))",
            c_formula == Some(self.c_init as f64),
            format!("C_init={}, formula={c_formula:?}", self.c_init),
        );
        out
    }
}
