//! Command-line front end: configuration, worker pool and result files.

pub mod commands;
pub mod config;
pub mod output;

use anyhow::Context;
use clap::{Parser, Subcommand};
use config::RunConfig;
use output::{envelope, write_all};
use polaron_core::exec::Executor;
use polaron_core::rng::SeedStreams;
use rayon::prelude::*;
use serde_json::json;
use std::path::PathBuf;

/// Runs index-parallel work on a private rayon pool. Items keep their
/// index order, and every item owns its random stream.
pub struct RayonExec {
    pool: rayon::ThreadPool,
}

impl RayonExec {
    pub fn new(workers: usize) -> anyhow::Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
        Ok(Self { pool })
    }
}

impl Executor for RayonExec {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}

#[derive(Parser, Debug)]
#[command(name = "polaron", version, about = "Monte Carlo for polaron path measures via M/G/∞ busy cycles")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Busy-cycle statistics against M/M/∞ closed forms.
    Cycles,
    /// F(ξ) for the intervals in `estimate_f.intervals`.
    EstimateF,
    /// Root of the tilting equation and the tilted cycle law.
    SolveLambda,
    /// Free energy from partition-function growth and from the tilt.
    Psi,
    /// Growth-condition surrogates over `grid.t`.
    GcScan,
    /// CLT covariance.
    Sigma,
    /// Functional CLT test battery over `grid.n`.
    Fclt,
    /// Free-energy derivative identities over `grid.alpha`.
    Identities,
    /// Renewal solver checks and the dormancy curve.
    RenewalSolve,
    /// Sandwich bounds on F and the Gaussian correlation suite.
    Bounds,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Cycles => "cycles",
            Command::EstimateF => "estimate-f",
            Command::SolveLambda => "solve-lambda",
            Command::Psi => "psi",
            Command::GcScan => "gc-scan",
            Command::Sigma => "sigma",
            Command::Fclt => "fclt",
            Command::Identities => "identities",
            Command::RenewalSolve => "renewal-solve",
            Command::Bounds => "bounds",
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn guard_reason(e: &polaron_core::Error) -> serde_json::Value {
    use polaron_core::Error as E;
    let kind = match e {
        E::NoRoot(_) => json!({ "kind": "no_root" }),
        E::LowEss { ess, floor } => json!({ "kind": "low_ess", "ess": ess, "floor": floor }),
        E::HeavyTail(cv) => json!({ "kind": "heavy_tail", "cv": cv }),
        E::Divergent(_) => json!({ "kind": "divergent" }),
        E::NotNormalized { mass } => json!({ "kind": "not_normalized", "mass": mass }),
        E::SignIndefinite { negative, share } => json!({ "kind": "sign_indefinite", "negative": negative, "share": share }),
        _ => json!({ "kind": "other" }),
    };
    let mut m = kind.as_object().unwrap().clone();
    m.insert("message".into(), json!(e.to_string()));
    serde_json::Value::Object(m)
}

/// Exit code: 0 success, 2 guard refusal, 1 usage or other error.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match load_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let exec = match RayonExec::new(workers.max(1)) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    let pot = match cfg.build_potential() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    let ctx = commands::Ctx { cfg: &cfg, pot, streams: SeedStreams::new(cfg.seed), exec: &exec };
    let name = cli.command.name();
    let res = match cli.command {
        Command::Cycles => commands::cycles(&ctx),
        Command::EstimateF => commands::estimate_f_cmd(&ctx),
        Command::SolveLambda => commands::solve_lambda(&ctx),
        Command::Psi => commands::psi(&ctx),
        Command::GcScan => commands::gc_scan_cmd(&ctx),
        Command::Sigma => commands::sigma(&ctx),
        Command::Fclt => commands::fclt(&ctx),
        Command::Identities => commands::identities(&ctx),
        Command::RenewalSolve => commands::renewal_solve(&ctx),
        Command::Bounds => commands::bounds(&ctx),
    };
    // the output location is not part of the result
    let pairs: Vec<(String, String)> = cfg.to_pairs().into_iter().filter(|(k, _)| k != "run.out").collect();
    let (doc, tables, code) = match res {
        Ok(o) => (envelope(name, cfg.seed, &pairs, "ok", ("result", o.result)), o.tables, 0),
        Err(e) if e.is_guard() => (envelope(name, cfg.seed, &pairs, "refused", ("reason", guard_reason(&e))), Vec::new(), 2),
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Err(e) = write_all(&cfg.out, name, &doc, &tables) {
        eprintln!("error: {e:#}");
        return 1;
    }
    {
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(&doc).unwrap());
    }
    if code == 2 {
        eprintln!("refused: {}", doc["reason"]["message"].as_str().unwrap_or(""));
    }
    code
}
