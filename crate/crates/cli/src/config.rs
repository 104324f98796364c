//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! potential.name = frohlich
//! model.alpha = 0.5
//! grid.t = 1, 2, 4
//! ```

use anyhow::{anyhow, bail, Context, Result};
use polaron_core::potentials::Potential;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub potential: String,
    /// `potential.<param>` entries other than the name.
    pub potential_params: BTreeMap<String, f64>,
    pub alpha: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub pool: usize,
    pub inner: usize,
    pub paths: usize,
    pub cycles: usize,
    pub z_samples: usize,
    pub sigma_cycles: usize,
    pub t_grid: Vec<f64>,
    pub grid_step: f64,
    pub alpha_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub n_grid: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub sigma_method: String,
    pub fclt_level: f64,
    pub fclt_grid_points: usize,
    pub fd_step: f64,
    pub renewal_horizon: f64,
    pub bounds_cases: usize,
    pub bounds_d_max: usize,
    pub bounds_mc: usize,
    pub sandwich_cycles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            potential: "frohlich".into(),
            potential_params: BTreeMap::new(),
            alpha: 0.5,
            seed: 1,
            out: PathBuf::from("polaron-out"),
            pool: 20_000,
            inner: 50,
            paths: 500,
            cycles: 100_000,
            z_samples: 4000,
            sigma_cycles: 2000,
            t_grid: vec![1.0, 2.0, 4.0],
            grid_step: 0.01,
            alpha_grid: Vec::new(),
            lambda_grid: Vec::new(),
            n_grid: vec![4.0, 16.0, 64.0],
            intervals: vec![(0.0, 1.0)],
            sigma_method: "rao-blackwell".into(),
            fclt_level: 0.01,
            fclt_grid_points: 400,
            fd_step: 0.05,
            renewal_horizon: 10.0,
            bounds_cases: 1000,
            bounds_d_max: 3,
            bounds_mc: 2000,
            sandwich_cycles: 1000,
        }
    }
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

fn parse_list(v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number {s:?}"))).collect()
}

fn parse_intervals(v: &str) -> Result<Vec<(f64, f64)>> {
    v.split(';')
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| anyhow!("interval {p:?} is not start:end"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

impl RunConfig {
    /// Every key with its canonical text value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![("potential.name".into(), self.potential.clone())];
        for (k, x) in &self.potential_params {
            v.push((format!("potential.{k}"), format!("{x:?}")));
        }
        let f = |x: f64| format!("{x:?}");
        v.extend([
            ("model.alpha".to_string(), f(self.alpha)),
            ("run.seed".into(), self.seed.to_string()),
            ("run.out".into(), self.out.display().to_string()),
            ("sizes.pool".into(), self.pool.to_string()),
            ("sizes.inner".into(), self.inner.to_string()),
            ("sizes.paths".into(), self.paths.to_string()),
            ("sizes.cycles".into(), self.cycles.to_string()),
            ("sizes.z".into(), self.z_samples.to_string()),
            ("sizes.sigma_cycles".into(), self.sigma_cycles.to_string()),
            ("grid.t".into(), list(&self.t_grid)),
            ("grid.step".into(), f(self.grid_step)),
            ("grid.alpha".into(), list(&self.alpha_grid)),
            ("grid.lambda".into(), list(&self.lambda_grid)),
            ("grid.n".into(), list(&self.n_grid)),
            ("estimate_f.intervals".into(), self.intervals.iter().map(|(a, b)| format!("{a:?}:{b:?}")).collect::<Vec<_>>().join(";")),
            ("sigma.method".into(), self.sigma_method.clone()),
            ("fclt.level".into(), f(self.fclt_level)),
            ("fclt.grid_points".into(), self.fclt_grid_points.to_string()),
            ("identities.fd_step".into(), f(self.fd_step)),
            ("renewal.horizon".into(), f(self.renewal_horizon)),
            ("bounds.cases".into(), self.bounds_cases.to_string()),
            ("bounds.d_max".into(), self.bounds_d_max.to_string()),
            ("bounds.mc".into(), self.bounds_mc.to_string()),
            ("bounds.sandwich_cycles".into(), self.sandwich_cycles.to_string()),
        ]);
        v
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", lineno + 1))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("line {}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = || v.parse::<usize>().with_context(|| format!("{key}: {v:?} is not a count"));
        let x = || v.parse::<f64>().with_context(|| format!("{key}: {v:?} is not a number"));
        match key {
            "potential.name" => self.potential = v.to_string(),
            k if k.starts_with("potential.") => {
                self.potential_params.insert(k["potential.".len()..].to_string(), x()?);
            }
            "model.alpha" => self.alpha = x()?,
            "run.seed" => self.seed = v.parse().with_context(|| format!("run.seed: {v:?} is not a 64-bit seed"))?,
            "run.out" => self.out = PathBuf::from(v),
            "sizes.pool" => self.pool = n()?,
            "sizes.inner" => self.inner = n()?,
            "sizes.paths" => self.paths = n()?,
            "sizes.cycles" => self.cycles = n()?,
            "sizes.z" => self.z_samples = n()?,
            "sizes.sigma_cycles" => self.sigma_cycles = n()?,
            "grid.t" => self.t_grid = parse_list(v)?,
            "grid.step" => self.grid_step = x()?,
            "grid.alpha" => self.alpha_grid = parse_list(v)?,
            "grid.lambda" => self.lambda_grid = parse_list(v)?,
            "grid.n" => self.n_grid = parse_list(v)?,
            "estimate_f.intervals" => self.intervals = parse_intervals(v)?,
            "sigma.method" => self.sigma_method = v.to_string(),
            "fclt.level" => self.fclt_level = x()?,
            "fclt.grid_points" => self.fclt_grid_points = n()?,
            "identities.fd_step" => self.fd_step = x()?,
            "renewal.horizon" => self.renewal_horizon = x()?,
            "bounds.cases" => self.bounds_cases = n()?,
            "bounds.d_max" => self.bounds_d_max = n()?,
            "bounds.mc" => self.bounds_mc = n()?,
            "bounds.sandwich_cycles" => self.sandwich_cycles = n()?,
            other => bail!("unknown key {other:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("sizes.pool", self.pool),
            ("sizes.inner", self.inner),
            ("sizes.paths", self.paths),
            ("sizes.cycles", self.cycles),
            ("sizes.z", self.z_samples),
            ("sizes.sigma_cycles", self.sigma_cycles),
            ("fclt.grid_points", self.fclt_grid_points),
            ("bounds.cases", self.bounds_cases),
            ("bounds.d_max", self.bounds_d_max),
            ("bounds.mc", self.bounds_mc),
            ("bounds.sandwich_cycles", self.sandwich_cycles),
        ];
        for (k, v) in sizes {
            if v < 1 {
                bail!("{k} must be ≥ 1");
            }
        }
        for (k, v) in [("model.alpha", self.alpha), ("grid.step", self.grid_step), ("identities.fd_step", self.fd_step), ("renewal.horizon", self.renewal_horizon)] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{k} = {v} must be positive");
            }
        }
        if !(self.fclt_level > 0.0 && self.fclt_level < 1.0) {
            bail!("fclt.level must lie in (0, 1)");
        }
        if !["rao-blackwell", "sampled"].contains(&self.sigma_method.as_str()) {
            bail!("sigma.method must be rao-blackwell or sampled");
        }
        self.build_potential()?;
        Ok(())
    }

    pub fn build_potential(&self) -> Result<Potential> {
        Potential::from_key(&self.potential, |k| self.potential_params.get(k).copied()).map_err(|e| anyhow!(e))
    }
}
