//! One function per subcommand, each returning a JSON result and CSV tables.

use crate::config::RunConfig;
use crate::output::{num, Outcome, Table};
use crate::RayonExec;
use polaron_core::cluster::{expected_cycle_length, sample_busy_cycle, Interval};
use polaron_core::diagnostics::{big_lambda_grid, correlation_inequality_suite, first_interval_moment, gc_scan, sandwich_suite, CorrelationOptions, GcOptions};
use polaron_core::estimate::{ratio_estimate, Estimate};
use polaron_core::exec::Executor;
use polaron_core::gaussian::{estimate_f, FMethod};
use polaron_core::potentials::Potential;
use polaron_core::renewal::{dormancy_probability_curve, solve_renewal_equation, RenewalGrid};
use polaron_core::rng::{domain, SeedStreams};
use polaron_core::stationary::{estimate_sigma, fclt_test, psi_identities_check, FcltOptions, IdentityOptions, SigmaMethod};
use polaron_core::tilting::{estimate_psi_direct, BoldZOptions, PoolOptions, SolveOptions, TiltOptions, TiltedLaw};
use polaron_core::Result;
use serde_json::json;

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub pot: Potential,
    pub streams: SeedStreams,
    pub exec: &'a RayonExec,
}

impl Ctx<'_> {
    fn pool(&self) -> PoolOptions {
        PoolOptions { n_pool: self.cfg.pool, n_inner: self.cfg.inner }
    }

    fn tilt(&self) -> TiltOptions {
        TiltOptions { pool: self.pool(), ..Default::default() }
    }

    fn bold(&self) -> BoldZOptions {
        BoldZOptions { n: self.cfg.z_samples.max(2), n_inner: self.cfg.inner, ..Default::default() }
    }

    fn law(&self, alpha: f64) -> Result<TiltedLaw> {
        TiltedLaw::solve(alpha, &self.pot, self.tilt(), &self.streams, self.exec)
    }
}

fn est_row(e: &Estimate) -> [String; 2] {
    [num(e.value), num(e.se)]
}

pub fn cycles(c: &Ctx) -> Result<Outcome> {
    let (alpha, beta) = (c.cfg.alpha, c.pot.beta());
    let n = c.cfg.cycles;
    let draws = c
        .exec
        .map(n, |j| sample_busy_cycle(&mut c.streams.stream(domain::CYCLES, j as u64), alpha, beta))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let total: Vec<f64> = draws.iter().map(|c| c.total()).collect();
    let dormant: Vec<f64> = draws.iter().map(|c| c.dormant).collect();
    let customers: Vec<f64> = draws.iter().map(|c| c.cluster.len() as f64).collect();
    let single: Vec<f64> = draws.iter().map(|c| (c.cluster.len() == 1) as u8 as f64).collect();
    let rho = alpha / beta;
    let result = json!({
        "alpha": alpha,
        "beta": beta,
        "n": n,
        "mean_cycle_length": Estimate::from_samples(&total),
        "mean_customers": Estimate::from_samples(&customers),
        "p_single_customer": Estimate::from_samples(&single),
        "long_run_dormancy": ratio_estimate(&dormant, &total),
        "closed_form": {
            "mean_cycle_length": expected_cycle_length(alpha, beta),
            "mean_customers": rho.exp(),
            "p_single_customer": beta / (alpha + beta),
            "long_run_dormancy": (-rho).exp(),
        },
    });
    let mut t = Table::new("cycles", &["index", "dormant", "active", "customers"]);
    for (i, cy) in draws.iter().enumerate() {
        t.push(vec![i.to_string(), num(cy.dormant), num(cy.cluster.active_length()), cy.cluster.len().to_string()]);
    }
    Ok(Outcome { result, tables: vec![t] })
}

pub fn estimate_f_cmd(c: &Ctx) -> Result<Outcome> {
    let iv: Vec<Interval> = c.cfg.intervals.iter().map(|&(a, b)| Interval::new(a, b)).collect();
    let mut methods = vec![("plain", FMethod::Plain)];
    if c.pot.completely_monotone() {
        methods.push(("mixture", FMethod::Mixture));
    }
    let mut t = Table::new("estimates", &["method", "value", "se", "log_value", "divergent"]);
    let mut out = serde_json::Map::new();
    for (k, (name, m)) in methods.into_iter().enumerate() {
        let mut rng = c.streams.stream(domain::MISC, k as u64);
        let e = estimate_f(&iv, &c.pot, c.cfg.cycles, &mut rng, m)?;
        let [v, s] = est_row(&e.estimate);
        t.push(vec![name.into(), v, s, num(e.log_value), e.divergent.to_string()]);
        out.insert(name.into(), serde_json::to_value(&e).unwrap());
    }
    let oracle = match iv.as_slice() {
        [one] => c.pot.h(one.len(), one.len()),
        _ => None,
    };
    let result = json!({ "intervals": c.cfg.intervals, "samples": c.cfg.cycles, "estimates": out, "single_interval_closed_form": oracle });
    Ok(Outcome { result, tables: vec![t] })
}

pub fn solve_lambda(c: &Ctx) -> Result<Outcome> {
    let law = c.law(c.cfg.alpha)?;
    let sol = law.solution().cloned();
    let l = law.lambda_star();
    let mut t = Table::new("lambda_curve", &["lambda", "big_lambda", "se"]);
    let lo = (l - 1.0).max(-c.cfg.alpha + 1e-3);
    for i in 0..=40 {
        let x = lo + (l + 1.0 - lo) * i as f64 / 40.0;
        let e = law.pool().big_lambda(x)?;
        let [v, s] = est_row(&e);
        t.push(vec![num(x), v, s]);
    }
    let result = json!({
        "alpha": c.cfg.alpha,
        "potential": c.pot.key(),
        "lambda_star": l,
        "solution": sol,
        "psi": law.psi(),
        "ess": law.ess(),
        "max_weight_share": law.max_weight_share(),
        "mean_total": law.mean_total(),
        "mean_customers": law.mean_customers(),
        "divergent_fraction": law.pool().divergent_fraction(),
    });
    Ok(Outcome { result, tables: vec![t] })
}

pub fn psi(c: &Ctx) -> Result<Outcome> {
    let direct = estimate_psi_direct(c.cfg.alpha, &c.pot, &c.cfg.t_grid, c.bold(), &c.streams.child(1), c.exec)?;
    let tilt = match c.law(c.cfg.alpha) {
        Ok(l) => json!({ "status": "root", "psi": l.psi(), "lambda_star": l.lambda_star(), "se": l.solution().map(|s| s.se) }),
        Err(e) => json!({ "status": e.to_string() }),
    };
    let mut t = Table::new("log_z", &["window", "log_z", "se"]);
    for (w, e) in &direct.log_z {
        let [v, s] = est_row(e);
        t.push(vec![num(*w), v, s]);
    }
    Ok(Outcome { result: json!({ "alpha": c.cfg.alpha, "direct": direct, "tilting": tilt }), tables: vec![t] })
}

pub fn gc_scan_cmd(c: &Ctx) -> Result<Outcome> {
    let opts = GcOptions { bold: c.bold(), tilt: c.tilt(), limit_pool: c.pool(), ..Default::default() };
    let rep = gc_scan(c.cfg.alpha, &c.pot, &c.cfg.t_grid, &opts, &c.streams, c.exec)?;
    let mut t = Table::new(
        "curves",
        &["T", "ratio", "ratio_se", "real_ratio", "real_ratio_se", "dormancy_direct", "dormancy_direct_se", "dormancy_identity", "dormancy_identity_se", "z_exp_phi_t", "z_exp_phi_t_se"],
    );
    for r in &rep.rows {
        let c4 = r.condition4.clone().map(|e| est_row(&e)).unwrap_or_else(|| [String::new(), String::new()]);
        let mut row = vec![num(r.t)];
        for e in [&r.ratio, &r.real_ratio, &r.dormancy.direct, &r.dormancy.identity] {
            row.extend(est_row(e));
        }
        row.extend(c4);
        t.push(row);
    }
    let mut tables = vec![t];
    if !c.cfg.alpha_grid.is_empty() && !c.cfg.lambda_grid.is_empty() {
        let grid = big_lambda_grid(&c.cfg.alpha_grid, &c.cfg.lambda_grid, &c.pot, c.pool(), &c.streams.child(7), c.exec)?;
        let mut g = Table::new("lambda_grid", &["alpha", "lambda", "big_lambda", "se"]);
        for (a, l, e) in grid {
            let [v, s] = est_row(&e);
            g.push(vec![num(a), num(l), v, s]);
        }
        tables.push(g);
    }
    Ok(Outcome { result: serde_json::to_value(&rep).unwrap(), tables })
}

fn sigma_method(c: &Ctx) -> SigmaMethod {
    if c.cfg.sigma_method == "sampled" {
        SigmaMethod::Sampled
    } else {
        SigmaMethod::RaoBlackwell
    }
}

fn sigma_table(rep: &polaron_core::stationary::SigmaReport) -> Table {
    let mut t = Table::new("sigma", &["i", "j", "value", "se"]);
    for (i, row) in rep.matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t.push(vec![i.to_string(), j.to_string(), num(*v), num(rep.se[i][j])]);
        }
    }
    t
}

pub fn sigma(c: &Ctx) -> Result<Outcome> {
    let law = c.law(c.cfg.alpha)?;
    let rep = estimate_sigma(&law, &c.pot, c.cfg.sigma_cycles.max(2), c.cfg.inner.max(2), sigma_method(c), &c.streams.child(2), c.exec)?;
    let t = sigma_table(&rep);
    Ok(Outcome { result: json!({ "alpha": c.cfg.alpha, "lambda_star": law.lambda_star(), "sigma": rep }), tables: vec![t] })
}

pub fn fclt(c: &Ctx) -> Result<Outcome> {
    let law = c.law(c.cfg.alpha)?;
    let sigma = estimate_sigma(&law, &c.pot, c.cfg.sigma_cycles.max(2), c.cfg.inner.max(2), sigma_method(c), &c.streams.child(2), c.exec)?;
    let opts = FcltOptions { n_paths: c.cfg.paths, grid_points: c.cfg.fclt_grid_points, level: c.cfg.fclt_level, ..Default::default() };
    let rep = fclt_test(&law, &c.pot, &c.cfg.n_grid, &sigma, &opts, &c.streams.child(3), c.exec)?;
    let mut t = Table::new("scales", &["n", "marginal_p_bonferroni", "independence_p", "modulus_pass", "ks_distance", "variance", "variance_se", "all_pass"]);
    for s in &rep.scales {
        t.push(vec![
            num(s.n),
            num(s.marginal_p_bonferroni),
            num(s.independence.p_value),
            s.modulus_pass.to_string(),
            num(s.ks_distance),
            num(s.variance.value),
            num(s.variance.se),
            s.all_pass().to_string(),
        ]);
    }
    Ok(Outcome { result: json!({ "alpha": c.cfg.alpha, "sigma": sigma, "fclt": rep }), tables: vec![t, sigma_table(&sigma)] })
}

pub fn identities(c: &Ctx) -> Result<Outcome> {
    let alphas = if c.cfg.alpha_grid.is_empty() { vec![c.cfg.alpha] } else { c.cfg.alpha_grid.clone() };
    let opts = IdentityOptions {
        pool: c.pool(),
        solve: SolveOptions { bootstrap: 100, ..Default::default() },
        fd_step: c.cfg.fd_step,
        deletion_entries: c.cfg.pool.min(5000),
        ..Default::default()
    };
    let rep = psi_identities_check(&alphas, &c.pot, &opts, &c.streams, c.exec)?;
    let mut t = Table::new(
        "identities",
        &["alpha", "psi", "psi_prime_fd", "psi_prime_fd_se", "psi_prime_deletion", "psi_prime_deletion_se", "lhs", "lhs_se", "rhs", "rhs_se", "relative_gap", "z"],
    );
    for a in &rep.alphas {
        let mut row = vec![num(a.alpha), num(a.psi.value)];
        for e in [&a.psi_prime_fd, &a.psi_prime_deletion, &a.lhs, &a.rhs] {
            row.extend(est_row(e));
        }
        row.extend([num(a.relative_gap), num(a.z)]);
        t.push(row);
    }
    Ok(Outcome { result: serde_json::to_value(&rep).unwrap(), tables: vec![t] })
}

/// Max error of the trapezoid solver against `U(t) = 1 + αt`.
pub fn poisson_oracle_error(alpha: f64, step: f64, horizon: f64) -> Result<f64> {
    let grid = RenewalGrid::from_fns(step, horizon, |t| alpha * (-alpha * t).exp(), |_| 1.0);
    let u = solve_renewal_equation(&grid)?;
    Ok(grid.times().iter().zip(&u).map(|(t, v)| (v - (1.0 + alpha * t)).abs()).fold(0.0, f64::max))
}

pub fn renewal_solve(c: &Ctx) -> Result<Outcome> {
    let (alpha, beta) = (c.cfg.alpha, c.pot.beta());
    let h = c.cfg.grid_step;
    let m = (c.cfg.renewal_horizon / h).round() as usize;
    let grid: Vec<f64> = (0..=m).map(|i| i as f64 * h).collect();
    let mut rng = c.streams.stream(domain::RENEWAL, 0);
    let curve = dormancy_probability_curve(alpha, beta, &grid, c.cfg.paths, &mut rng)?;
    let e1 = poisson_oracle_error(alpha, h, c.cfg.renewal_horizon)?;
    let e2 = poisson_oracle_error(alpha, h / 2.0, c.cfg.renewal_horizon)?;
    let mut t = Table::new("dormancy", &["t", "closed_form", "renewal", "simulated", "simulated_se"]);
    for i in 0..curve.t.len() {
        t.push(vec![num(curve.t[i]), num(curve.closed_form[i]), num(curve.renewal[i]), num(curve.simulated[i]), num(curve.simulated_se[i])]);
    }
    let max_renewal_gap = curve.closed_form.iter().zip(&curve.renewal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let result = json!({
        "alpha": alpha,
        "beta": beta,
        "step": h,
        "poisson_oracle": { "max_error": e1, "max_error_half_step": e2, "reduction": e1 / e2 },
        "max_renewal_vs_closed_form": max_renewal_gap,
    });
    Ok(Outcome { result, tables: vec![t] })
}

pub fn bounds(c: &Ctx) -> Result<Outcome> {
    let sandwich = match sandwich_suite(c.cfg.alpha, &c.pot, c.cfg.sandwich_cycles, c.cfg.inner.max(2), &c.streams.child(4), c.exec) {
        Ok(r) => serde_json::to_value(r).unwrap(),
        Err(e) if matches!(e, polaron_core::Error::Unsupported(_)) => json!({ "status": e.to_string() }),
        Err(e) => return Err(e),
    };
    let moment = match first_interval_moment(c.cfg.alpha, &c.pot, 1.0, c.cfg.cycles, &mut c.streams.stream(domain::SANDWICH, 1 << 39)) {
        Ok(e) => serde_json::to_value(e).unwrap(),
        Err(e) => json!({ "status": e.to_string() }),
    };
    let opts = CorrelationOptions { d_max: c.cfg.bounds_d_max, n_cases: c.cfg.bounds_cases, n_mc: c.cfg.bounds_mc.max(2), ..Default::default() };
    let corr = correlation_inequality_suite(&opts, &c.streams.child(5), c.exec)?;
    let mut t = Table::new("correlation_cases", &["case", "dimension", "product_margin", "quasiconvex_margin", "mc_max_z"]);
    for (i, r) in corr.cases.iter().enumerate() {
        t.push(vec![i.to_string(), r.dimension.to_string(), num(r.product_margin), num(r.quasiconvex_margin), num(r.mc_max_z)]);
    }
    let summary = json!({
        "n_cases": corr.n_cases,
        "tolerance": corr.tolerance,
        "product_violations": corr.product_violations,
        "quasiconvex_violations": corr.quasiconvex_violations,
        "min_product_margin": corr.min_product_margin,
        "min_quasiconvex_margin": corr.min_quasiconvex_margin,
        "mc_disagreements": corr.mc_disagreements,
    });
    Ok(Outcome { result: json!({ "sandwich": sandwich, "first_interval_moment": moment, "correlation": summary }), tables: vec![t] })
}
