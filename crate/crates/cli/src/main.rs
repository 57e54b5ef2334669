//! `backoff-lab`: simulations, classifiers, block tables, verifiers and
//! experiments over configurable send sequences.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use backoff_core::analysis::{
    chernoff_grid, empty_stucksend_bound_test, jammed_ensemble, stationarity_test, Sabotage, TestReport,
};
use backoff_core::backoff::{run_backoff, BinCounts, ObserverConfig};
use backoff_core::blocks::build_block_table;
use backoff_core::jammed::{run_jammed, run_two_stream, verify_coupling_xy, verify_coupling_yt};
use backoff_core::sequences::classify;
use backoff_core::unsticking::{poisson_domination_experiment, verify_time_reversal, EnumerationBounds, FillConfig};
use backoff_core::{BlockTable, STREAM_DERIVATION_VERSION};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{parse_sequence, ExperimentConfig, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "backoff-lab", version, about = "Backoff process simulations and verifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single process and write its step log and summary.
    Simulate {
        #[arg(value_enum)]
        process: Process,
        #[command(flatten)]
        common: Common,
    },
    /// Decide which instability case covers a sequence.
    Classify {
        #[command(flatten)]
        common: Common,
    },
    /// Block tables.
    Blocks {
        #[command(subcommand)]
        action: BlocksAction,
    },
    /// Run a verifier; exits with status 1 when it fails.
    Verify {
        #[arg(value_enum)]
        test: Verifier,
        #[command(flatten)]
        common: Common,
    },
    /// Run an experiment suite.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum BlocksAction {
    /// Write the table as CSV (`i, lo, hi, weight, weight_ceil, tau`) and JSON.
    Dump {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Process {
    Backoff,
    Jammed,
    TwoStream,
}

#[derive(Clone, Copy, ValueEnum)]
enum Verifier {
    CouplingXy,
    CouplingYt,
    TimeReversal,
    Chernoff,
    Stationarity,
    EmptyStucksend,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentName {
    FillDomination,
}

#[derive(Args, Default)]
struct Common {
    /// JSON config, or a previous output whose embedded config is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sequence: beb, constant:C, geometric:RHO, poly:ALPHA, doubly-exp:BASE, inv-log-log, JSON or @file.
    #[arg(long)]
    seq: Option<String>,
    /// Replace p_0.
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<u64>,
    #[arg(long)]
    j_obs: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    t0: Option<u64>,
    #[arg(long)]
    tau_end: Option<u64>,
    #[arg(long)]
    max_bin: Option<u64>,
    /// Output directory; defaults to the config, then $BACKOFF_LAB_OUT, then ./backoff-lab-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seq {
            c.sequence = parse_sequence(s)?;
        }
        if let Some(p0) = self.p0 {
            c.sequence = c.sequence.with_p0(p0)?;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(lambda, steps, seed, replicas, j_obs, stride, eta, nu, horizon, t0, max_bin);
        if self.tau_end.is_some() {
            c.tau_end = self.tau_end;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Envelope shared by every JSON output.
#[derive(Serialize)]
struct Output<'a, T: Serialize> {
    schema_version: u32,
    derivation_version: u32,
    command: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
    pass: Option<bool>,
    result: T,
}

struct Sink {
    dir: PathBuf,
}

impl Sink {
    fn new(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<Self> {
        let dir = cfg.output_dir(flag);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, cfg: &ExperimentConfig, command: &str, pass: Option<bool>, result: T) -> Result<String> {
        let out = Output {
            schema_version: SCHEMA_VERSION,
            derivation_version: STREAM_DERIVATION_VERSION,
            command,
            seed: cfg.seed,
            config: cfg,
            pass,
            result,
        };
        let text = serde_json::to_string_pretty(&out)?;
        fs::write(self.path(name), &text).with_context(|| format!("writing {name}"))?;
        Ok(text)
    }

    fn jsonl<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        writeln!(w, "{}", serde_json::json!({ "schema_version": SCHEMA_VERSION, "derivation_version": STREAM_DERIVATION_VERSION }))?;
        for r in rows {
            serde_json::to_writer(&mut w, &r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    fn csv<T: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct BackoffSummaryRow {
    schema_version: u32,
    derivation_version: u32,
    seed: u64,
    lambda: f64,
    steps: u64,
    births: u64,
    escapes: u64,
    success_rate: f64,
    final_backlog: u64,
    empty_steps: u64,
    backlog_drift: f64,
}

#[derive(Serialize)]
struct BlockRow {
    i: u64,
    lo: u64,
    hi: u64,
    weight: f64,
    weight_ceil: String,
    /// `tau_i` when tabulated.
    tau: String,
}

fn simulate(process: Process, common: &Common) -> Result<bool> {
    let cfg = common.resolve()?;
    let sink = Sink::new(&cfg, common.out.as_deref())?;
    let seq = &cfg.sequence;
    match process {
        Process::Backoff => {
            let log = run_backoff(seq, cfg.lambda, cfg.steps, cfg.seed, ObserverConfig { stride: cfg.stride });
            sink.jsonl(&format!("backoff-{}.jsonl", cfg.seed), &log.records)?;
            let s = &log.summary;
            sink.csv(
                &format!("backoff-{}-summary.csv", cfg.seed),
                [BackoffSummaryRow {
                    schema_version: SCHEMA_VERSION,
                    derivation_version: STREAM_DERIVATION_VERSION,
                    seed: cfg.seed,
                    lambda: cfg.lambda,
                    steps: s.steps,
                    births: s.births,
                    escapes: s.escapes,
                    success_rate: s.success_rate,
                    final_backlog: s.final_backlog,
                    empty_steps: s.empty_steps,
                    backlog_drift: s.backlog_drift,
                }],
            )?;
            println!("{}", sink.json(&format!("backoff-{}.json", cfg.seed), &cfg, "simulate backoff", None, s)?);
        }
        Process::Jammed => {
            let run = run_jammed(seq, cfg.lambda, cfg.j_obs, cfg.steps, cfg.seed, false)?;
            let stride = cfg.stride.max(1) as usize;
            sink.jsonl(&format!("jammed-{}.jsonl", cfg.seed), run.events.iter().skip(stride - 1).step_by(stride))?;
            let summary = serde_json::json!({
                "steps": cfg.steps,
                "unsticks": run.final_state.unsticks,
                "final_state": run.final_state,
            });
            println!("{}", sink.json(&format!("jammed-{}.json", cfg.seed), &cfg, "simulate jammed", None, summary)?);
        }
        Process::TwoStream => {
            let run = run_two_stream(seq, cfg.lambda, cfg.j_obs, cfg.steps, cfg.seed)?;
            let stride = cfg.stride.max(1) as usize;
            let rows = run.stuck.iter().enumerate().step_by(stride).map(|(t, s)| serde_json::json!({ "t": t, "stuck": s }));
            sink.jsonl(&format!("two-stream-{}.jsonl", cfg.seed), rows)?;
            let summary = serde_json::json!({
                "steps": cfg.steps,
                "unsticks": run.unsticks,
                "final_state": run.final_state,
            });
            println!("{}", sink.json(&format!("two-stream-{}.json", cfg.seed), &cfg, "simulate two-stream", None, summary)?);
        }
    }
    Ok(true)
}

fn table(cfg: &ExperimentConfig, block_cfg: &backoff_core::BlockConfig) -> Result<BlockTable> {
    build_block_table(&cfg.sequence, cfg.lambda, cfg.eta, cfg.nu, block_cfg).context(
        "building the block table; the full-size constants are infeasible at desk scale, so set `blocks.overrides` (kappa, zeta, i0, tau_init, c_init) in the config",
    )
}

fn blocks_dump(common: &Common) -> Result<bool> {
    let cfg = common.resolve()?;
    let sink = Sink::new(&cfg, common.out.as_deref())?;
    let t = table(&cfg, &cfg.blocks)?;
    let rows = t.blocks.iter().map(|b| BlockRow {
        i: b.index,
        lo: b.lo,
        hi: b.hi,
        weight: b.weight,
        weight_ceil: b.weight_ceil.to_string(),
        tau: t.tau.get(b.index as usize).map(|x| x.to_string()).unwrap_or_default(),
    });
    sink.csv("blocks.csv", rows)?;
    let checks = t.check_conditions(&cfg.sequence);
    #[derive(Serialize)]
    struct Dump<'a> {
        table: &'a BlockTable,
        conditions: Vec<backoff_core::blocks::ConditionCheck>,
    }
    println!("{}", sink.json("blocks.json", &cfg, "blocks dump", None, Dump { table: &t, conditions: checks })?);
    Ok(true)
}

fn summary_line(name: &str, pass: bool, detail: &str) {
    eprintln!("{:<18} {:<4}  {detail}", name, if pass { "PASS" } else { "FAIL" });
}

fn verify(test: Verifier, common: &Common) -> Result<bool> {
    let cfg = common.resolve()?;
    let sink = Sink::new(&cfg, common.out.as_deref())?;
    let seq = &cfg.sequence;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + cfg.replicas).collect();
    let (name, pass, text) = match test {
        Verifier::CouplingXy => {
            let reps = seeds
                .iter()
                .map(|&s| verify_coupling_xy(seq, cfg.lambda, cfg.j_obs, cfg.steps, s))
                .collect::<Result<Vec<_>, _>>()?;
            let pass = reps.iter().all(|r| r.pass());
            summary_line("coupling-xy", pass, &format!("{} seeds x {} steps", reps.len(), cfg.steps));
            ("coupling-xy", pass, sink.json("verify-coupling-xy.json", &cfg, "verify coupling-xy", Some(pass), &reps)?)
        }
        Verifier::CouplingYt => {
            let reps = seeds
                .iter()
                .map(|&s| verify_coupling_yt(seq, cfg.lambda, cfg.j_obs, cfg.steps, s))
                .collect::<Result<Vec<_>, _>>()?;
            let pass = reps.iter().all(|r| r.pass());
            summary_line("coupling-yt", pass, &format!("{} seeds x {} steps", reps.len(), cfg.steps));
            ("coupling-yt", pass, sink.json("verify-coupling-yt.json", &cfg, "verify coupling-yt", Some(pass), &reps)?)
        }
        Verifier::TimeReversal => {
            let block_cfg = cfg.table_config();
            let t = table(&cfg, &block_cfg)?;
            let bounds = EnumerationBounds { t0: cfg.t0, tau_end: cfg.tau_end.unwrap_or(4), max_bin: cfg.max_bin };
            let rep = verify_time_reversal(seq, cfg.lambda, &t, bounds)?;
            let pass = rep.pass();
            summary_line(
                "time-reversal",
                pass,
                &format!("{} trajectories, max relative error {:.1e}", rep.trajectories, rep.max_relative_error),
            );
            let result = serde_json::json!({ "blocks": block_cfg, "report": rep });
            ("time-reversal", pass, sink.json("verify-time-reversal.json", &cfg, "verify time-reversal", Some(pass), result)?)
        }
        Verifier::Chernoff => {
            let g = chernoff_grid();
            let pass = g.violations == 0;
            summary_line("chernoff", pass, &format!("{} violations", g.violations));
            ("chernoff", pass, sink.json("verify-chernoff.json", &cfg, "verify chernoff", Some(pass), &g)?)
        }
        Verifier::Stationarity => {
            let max_bin = cfg.max_bin.min(cfg.j_obs);
            let samples = jammed_ensemble(seq, cfg.lambda, cfg.j_obs, cfg.steps, max_bin, &seeds, Sabotage::None)?;
            let rep = stationarity_test(seq, cfg.lambda, &samples, &seeds, 1e-3)?;
            summary_line("stationarity", rep.pass, &format!("chi-square p = {:.4}", rep.chi_square.statistic));
            ("stationarity", rep.pass, sink.json("verify-stationarity.json", &cfg, "verify stationarity", Some(rep.pass), &rep)?)
        }
        Verifier::EmptyStucksend => {
            let cases: Vec<_> = [1u64, 3, 7]
                .iter()
                .map(|&x| empty_stucksend_bound_test(seq, cfg.lambda, &BinCounts(vec![0, x]), cfg.replicas, cfg.seed + x))
                .collect();
            let pass = cases.iter().all(|c| c.report.pass);
            for c in &cases {
                summary_line("empty-stucksend", c.report.pass, &report_detail(&c.report));
            }
            ("empty-stucksend", pass, sink.json("verify-empty-stucksend.json", &cfg, "verify empty-stucksend", Some(pass), &cases)?)
        }
    };
    let _ = name;
    println!("{text}");
    Ok(pass)
}

fn report_detail(r: &TestReport) -> String {
    format!("{} = {:.4} vs {:.4} (n = {})", r.name, r.statistic, r.reference, r.sample_size)
}

fn experiment(name: ExperimentName, common: &Common) -> Result<bool> {
    let cfg = common.resolve()?;
    let sink = Sink::new(&cfg, common.out.as_deref())?;
    match name {
        ExperimentName::FillDomination => {
            let block_cfg = cfg.table_config();
            let t = table(&cfg, &block_cfg)?;
            let tau_end = match cfg.tau_end {
                Some(x) => x,
                None => *t.tau.get(2).context("table has no tau_2; raise blocks.max_block")? as u64,
            };
            let fc = FillConfig { lambda: cfg.lambda, t0: cfg.t0, tau_end, replicas: cfg.replicas, seed: cfg.seed };
            let rep = poisson_domination_experiment(&cfg.sequence, &t, &fc)?;
            for r in &rep.rows {
                summary_line(
                    &format!("fill bin {}", r.bin),
                    r.mean_pass,
                    &format!("mean {:.3} vs lambda/(4p) = {:.3} (se {:.3})", r.mean, r.target, r.std_error),
                );
            }
            let result = serde_json::json!({ "blocks": block_cfg, "report": rep });
            println!("{}", sink.json("experiment-fill-domination.json", &cfg, "experiment fill-domination", Some(rep.pass), result)?);
            Ok(rep.pass)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { process, common } => simulate(process, &common),
        Command::Classify { common } => {
            let cfg = common.resolve()?;
            let sink = Sink::new(&cfg, common.out.as_deref())?;
            let v = classify(&cfg.sequence, cfg.lambda, cfg.horizon);
            println!("{}", sink.json("classify.json", &cfg, "classify", None, &v)?);
            Ok(true)
        }
        Command::Blocks { action: BlocksAction::Dump { common } } => blocks_dump(&common),
        Command::Verify { test, common } => verify(test, &common),
        Command::Experiment { name, common } => experiment(name, &common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
