use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use backoff_core::{BlockConfig, BlockOverrides, SendSequence, TailRule};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_ENV: &str = "BACKOFF_LAB_OUT";

/// Everything a run depends on. Outputs embed the resolved config, so an
/// output file can be fed back through `--config` to reproduce the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_sequence")]
    pub sequence: SendSequence,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default = "default_j_obs")]
    pub j_obs: u64,
    /// Keep one step record every `stride` steps.
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default)]
    pub blocks: BlockConfig,
    #[serde(default = "default_t0")]
    pub t0: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_end: Option<u64>,
    #[serde(default = "default_max_bin")]
    pub max_bin: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_sequence() -> SendSequence {
    SendSequence::binary_exponential()
}
fn default_lambda() -> f64 {
    0.5
}
fn default_steps() -> u64 {
    10_000
}
fn default_replicas() -> u64 {
    100
}
fn default_j_obs() -> u64 {
    32
}
fn one() -> u64 {
    1
}
fn default_eta() -> f64 {
    0.5
}
fn default_nu() -> f64 {
    0.4
}
fn default_horizon() -> u64 {
    10_000
}
fn default_t0() -> u64 {
    10
}
fn default_max_bin() -> u64 {
    3
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ExperimentConfig {
    /// Reads a config file, or the `config` field of a previous output.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
        serde_json::from_value(value).with_context(|| format!("invalid config in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version);
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            bail!("lambda must lie in (0, 1), got {}; rates of 1 or more are unstable for every sequence", self.lambda);
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) || !(self.nu > 0.0 && self.nu < 1.0) {
            bail!("need eta in (0, 1] and nu in (0, 1), got eta={}, nu={}", self.eta, self.nu);
        }
        if self.horizon == 0 || self.blocks.horizon == 0 {
            bail!("table horizon must be positive; set `horizon` and `blocks.horizon`");
        }
        if self.j_obs == 0 {
            bail!("j_obs must be at least 1");
        }
        Ok(())
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("backoff-lab-out"))
    }

    /// Block config used by commands that need a table: the configured one,
    /// or a scaled-down table (`kappa = 3`, `I_0 = 1`) when no override is set.
    pub fn table_config(&self) -> BlockConfig {
        if !self.blocks.overrides.is_empty() {
            return self.blocks.clone();
        }
        BlockConfig {
            overrides: BlockOverrides {
                kappa: Some(3),
                i0: Some(1),
                zeta: Some(6.0),
                tau_init: Some(1),
                c_init: Some(1),
                ..Default::default()
            },
            max_block: 5,
            horizon: 1000,
            sum_budget: 1_000_000,
        }
    }
}

/// `beb`, `constant:C`, `geometric:RHO`, `poly:ALPHA`, `doubly-exp:BASE`,
/// `inv-log-log`, inline JSON, or `@file.json`.
pub fn parse_sequence(spec: &str) -> Result<SendSequence> {
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().with_context(|| format!("bad number `{s}` in sequence `{spec}`")) };
    if let Some(path) = spec.strip_prefix('@') {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        return serde_json::from_str(&text).with_context(|| format!("invalid sequence in {path}"));
    }
    if spec.trim_start().starts_with('{') {
        return serde_json::from_str(spec).context("invalid inline sequence JSON");
    }
    let (name, arg) = spec.split_once(':').map_or((spec, None), |(a, b)| (a, Some(b)));
    let need = || arg.with_context(|| format!("sequence `{name}` needs a parameter, e.g. `{name}:0.5`"));
    let seq = match name {
        "beb" | "binary-exponential" => SendSequence::binary_exponential(),
        "constant" => SendSequence::constant(num(need()?)?)?,
        "geometric" => SendSequence::geometric(num(need()?)?)?,
        "poly" | "polynomial" => SendSequence::polynomial(num(need()?)?)?,
        "doubly-exp" | "doubly-exponential" => SendSequence::doubly_exponential(num(need()?)?)?,
        "inv-log-log" => SendSequence::explicit(Vec::new(), TailRule::InvLogLog)?,
        _ => bail!("unknown sequence `{spec}`; try beb, constant:C, geometric:RHO, poly:ALPHA, doubly-exp:BASE, inv-log-log, JSON or @file"),
    };
    Ok(seq)
}
