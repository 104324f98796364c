//! Growth-condition scans, the dormancy identity, the sandwich bounds on `F`
//! and the Gaussian correlation inequality suite.

use crate::cluster::{intensity_mass, sample_busy_cycle};
use crate::error::{check, Error, Result};
use crate::estimate::{ratio_estimate, Estimate, RunningStats};
use crate::exec::Executor;
use crate::potentials::{Potential, PotentialKind};
use crate::rng::{domain, SeedStreams};
use crate::stats::{normal_cdf, weights_ess};
use crate::tilting::{bold_z_draws, cluster_weight, limit_constant, BoldZOptions, CyclePool, PoolOptions, TiltOptions, TiltedLaw};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

/// `P(no customer at t)` for an empty-started queue with `Exp(β)` service.
pub fn empty_queue_dormancy(alpha: f64, beta: f64, t: f64) -> f64 {
    (-alpha * (1.0 - (-beta * t).exp()) / beta).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcOptions {
    pub bold: BoldZOptions,
    pub tilt: TiltOptions,
    /// Fresh cycles for the limit constant.
    pub limit_pool: PoolOptions,
    pub min_ess: f64,
}

impl Default for GcOptions {
    fn default() -> Self {
        Self { bold: BoldZOptions::default(), tilt: TiltOptions::default(), limit_pool: PoolOptions::default(), min_ess: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DormancyReport {
    pub t: f64,
    /// `𝐙_T` and `𝐙_{2T}`.
    pub z_t: Estimate,
    pub z_2t: Estimate,
    /// `F`-weighted fraction of configurations on a window of length `2T`
    /// that are dormant at the midpoint.
    pub direct: Estimate,
    /// `P(N_T=0)²/P(N_{2T}=0) · 𝐙_T²/𝐙_{2T}`.
    pub identity: Estimate,
    pub z_distance: f64,
    pub ess: f64,
    pub flags: Vec<String>,
}

/// Dormancy at the centre of the Gibbs measure on `[−T, T]`, both directly and
/// through the partition-function identity.
pub fn dormancy_under_gibbs<E: Executor>(alpha: f64, pot: &Potential, t: f64, opts: &GcOptions, streams: &SeedStreams, exec: &E) -> Result<DormancyReport> {
    check(t > 0.0 && t.is_finite(), || format!("T = {t} must be positive"))?;
    let beta = pot.beta();
    let short = bold_z_draws(alpha, pot, t, opts.bold, &streams.child(0), exec)?;
    let long = bold_z_draws(alpha, pot, 2.0 * t, opts.bold, &streams.child(1), exec)?;
    let z_t = mean_estimate(short.iter().map(|d| d.0));
    let z_2t = mean_estimate(long.iter().map(|d| d.0));
    let w: Vec<f64> = long.iter().map(|d| d.0).collect();
    let hits: Vec<f64> = long.iter().map(|d| if d.1 { d.0 } else { 0.0 }).collect();
    let direct = ratio_estimate(&hits, &w);
    let p = empty_queue_dormancy(alpha, beta, t).powi(2) / empty_queue_dormancy(alpha, beta, 2.0 * t);
    let v = p * z_t.value.powi(2) / z_2t.value;
    let rel = (4.0 * (z_t.se / z_t.value).powi(2) + (z_2t.se / z_2t.value).powi(2)).sqrt();
    let identity = Estimate::new(v, v * rel, z_2t.n);
    let ess = weights_ess(&w);
    let mut flags = Vec::new();
    if ess < opts.min_ess {
        flags.push(format!("low ESS {ess:.0} at T={t}"));
    }
    Ok(DormancyReport { t, z_distance: direct.z_distance(&identity), z_t, z_2t, direct, identity, ess, flags })
}

fn mean_estimate(xs: impl Iterator<Item = f64>) -> Estimate {
    let mut s = RunningStats::default();
    xs.for_each(|x| s.push(x));
    s.estimate()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    ConsistentGood,
    ConsistentBad,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::ConsistentGood => "consistent-good",
            Verdict::ConsistentBad => "consistent-bad",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcRow {
    pub t: f64,
    pub dormancy: DormancyReport,
    /// `𝐙_{2T}/𝐙_T²`.
    pub ratio: Estimate,
    /// `Z_{2T}/Z_T²` for the unnormalized partition function.
    pub real_ratio: Estimate,
    /// `𝐙_T e^{−φT}`; absent when the tilting equation has no root.
    pub condition4: Option<Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub alpha: f64,
    pub potential: String,
    /// `"root"` or the reason the tilting equation was not solved.
    pub lambda_status: String,
    pub lambda_star: Option<Estimate>,
    /// `(α/(α+λ))·E[T₁]/Ê[T̂₁]`.
    pub theorem_limit: Option<Estimate>,
    pub rows: Vec<GcRow>,
    /// `exp(α∫τ f(τ)dτ)` for potentials with an integrable envelope `f`.
    pub ratio_bound: Option<f64>,
    pub bound_violations: usize,
    pub condition4_stabilizes: bool,
    pub ratio_stabilizes: bool,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

/// `exp(α∫τ f(τ)dτ)` with `f` the time envelope of `|w|`; only bounded
/// potentials have one.
pub fn real_ratio_bound(alpha: f64, pot: &Potential) -> Option<f64> {
    let b = pot.beta();
    let shift = pot.shift();
    if shift < 0.0 {
        return None;
    }
    let base = match pot.kind() {
        PotentialKind::BoundedExponential { c, decay, .. } => c / (decay * decay),
        PotentialKind::Trivial { rate } => 1.0 / rate,
        _ => return None,
    };
    Some((alpha * (base + shift / b)).exp())
}

fn within(a: &Estimate, b: &Estimate, k: f64) -> bool {
    (a.value - b.value).abs() <= k * (a.se.powi(2) + b.se.powi(2)).sqrt() + 1e-9 * a.value.abs().max(1.0)
}

/// All four surrogates of the growth condition on a list of `T`.
pub fn gc_scan<E: Executor>(alpha: f64, pot: &Potential, t_list: &[f64], opts: &GcOptions, streams: &SeedStreams, exec: &E) -> Result<EquivalenceReport> {
    check(!t_list.is_empty() && t_list[0] > 0.0, || "T list must be non-empty and positive".into())?;
    check(t_list.windows(2).all(|w| w[0] < w[1]), || "T list must be increasing".into())?;
    let beta = pot.beta();
    let mut notes = Vec::new();
    let (lambda_status, law, no_root) = match TiltedLaw::solve(alpha, pot, opts.tilt, &streams.child(0), exec) {
        Ok(l) => ("root".to_string(), Some(l), false),
        Err(e) => (e.to_string(), None, matches!(e, Error::NoRoot(_))),
    };
    let lambda_star = law.as_ref().map(|l| {
        let se = l.solution().map(|s| s.se).unwrap_or(0.0);
        Estimate::new(l.lambda_star(), se, l.pool().len() as u64)
    });
    let theorem_limit = match &law {
        Some(l) => Some(limit_constant(l, pot, opts.limit_pool, &streams.child(1), exec)?.renewal_form),
        None => None,
    };
    let ratio_bound = real_ratio_bound(alpha, pot);
    let mut rows = Vec::new();
    for (i, &t) in t_list.iter().enumerate() {
        let dormancy = dormancy_under_gibbs(alpha, pot, t, opts, &streams.child(100 + i as u64), exec)?;
        notes.extend(dormancy.flags.iter().cloned());
        let (zt, z2) = (&dormancy.z_t, &dormancy.z_2t);
        let r = z2.value / zt.value.powi(2);
        let rel = ((z2.se / z2.value).powi(2) + 4.0 * (zt.se / zt.value).powi(2)).sqrt();
        let ratio = Estimate::new(r, r * rel, z2.n);
        // Z_L = e^{c_{α,L/2}} 𝐙_L
        let k = (intensity_mass(alpha, t, beta) - 2.0 * intensity_mass(alpha, t / 2.0, beta)).exp();
        let real_ratio = Estimate::new(r * k, r * k * rel, z2.n);
        let condition4 = lambda_star.as_ref().map(|l| {
            let v = zt.value * (-l.value * t).exp();
            Estimate::new(v, v * ((zt.se / zt.value).powi(2) + (t * l.se).powi(2)).sqrt(), zt.n)
        });
        rows.push(GcRow { t, dormancy, ratio, real_ratio, condition4 });
    }
    let bound_violations = match ratio_bound {
        Some(b) => rows.iter().filter(|r| r.real_ratio.value > b + 3.0 * r.real_ratio.se + 1e-12 * b).count(),
        None => 0,
    };
    let n = rows.len();
    let last_two = |f: &dyn Fn(&GcRow) -> Option<Estimate>| -> Option<(Estimate, Estimate)> {
        if n < 2 {
            return None;
        }
        Some((f(&rows[n - 2])?, f(&rows[n - 1])?))
    };
    let condition4_stabilizes = match (last_two(&|r| r.condition4.clone()), &theorem_limit) {
        (Some((a, b)), Some(th)) => within(&a, &b, 2.0) && within(&a, th, 2.0) && within(&b, th, 2.0),
        _ => false,
    };
    let ratio_stabilizes = last_two(&|r| Some(r.ratio.clone())).map(|(a, b)| within(&a, &b, 2.0)).unwrap_or(false);
    let ratio_grows = n >= 2 && {
        let (a, b) = (&rows[0].ratio, &rows[n - 1].ratio);
        b.value - a.value > 3.0 * (a.se.powi(2) + b.se.powi(2)).sqrt()
    };
    let verdict = if condition4_stabilizes && ratio_stabilizes {
        Verdict::ConsistentGood
    } else if no_root && ratio_grows {
        Verdict::ConsistentBad
    } else {
        if condition4_stabilizes != ratio_stabilizes {
            notes.push("condition-4 and ratio surrogates disagree at the largest T".into());
        }
        Verdict::Inconclusive
    };
    Ok(EquivalenceReport {
        alpha,
        potential: pot.key().to_string(),
        lambda_status,
        lambda_star,
        theorem_limit,
        rows,
        ratio_bound,
        bound_violations,
        condition4_stabilizes,
        ratio_stabilizes,
        verdict,
        notes,
    })
}

/// `Λ̂(λ)` on an `α × λ` grid; rows with `λ ≤ −α` are skipped.
pub fn big_lambda_grid<E: Executor>(
    alpha_list: &[f64],
    lambda_list: &[f64],
    pot: &Potential,
    pool: PoolOptions,
    streams: &SeedStreams,
    exec: &E,
) -> Result<Vec<(f64, f64, Estimate)>> {
    let mut out = Vec::new();
    for (i, &alpha) in alpha_list.iter().enumerate() {
        let p = CyclePool::build(alpha, pot, pool, &streams.child(i as u64), exec)?;
        for &l in lambda_list.iter().filter(|&&l| l > -alpha) {
            out.push((alpha, l, p.big_lambda(l)?));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub alpha: f64,
    pub n_cycles: usize,
    /// `F̂` below `∏h(τ,τ)` or above `∏h(τ,σ∧τ)` by more than 3 SE.
    pub violations: usize,
    pub violation_rate: Estimate,
    /// Largest `|F̂ − h(τ,τ)|/SE` over single-interval cycles.
    pub single_interval_max_z: f64,
    pub single_interval_cycles: usize,
    /// `∏h(τ,σ∧τ) ≥ ∏h(τ,τ)` held on every cycle.
    pub ordering_holds: bool,
    /// Mean of `log(upper/lower)`.
    pub mean_log_gap: f64,
}

fn require_sandwich(pot: &Potential) -> Result<()> {
    if !pot.rotationally_symmetric() || pot.h(1.0, 1.0).is_none() {
        return Err(Error::Unsupported(format!("{}: the sandwich needs a rotationally symmetric mixture potential", pot.key())));
    }
    Ok(())
}

/// Lower and upper product bounds on `F(ξ)` checked on raw busy cycles.
pub fn sandwich_suite<E: Executor>(alpha: f64, pot: &Potential, n_cycles: usize, n_inner: usize, streams: &SeedStreams, exec: &E) -> Result<SandwichReport> {
    require_sandwich(pot)?;
    check(n_cycles >= 1 && n_inner >= 2, || "need n_cycles ≥ 1 and n_inner ≥ 2".into())?;
    let beta = pot.beta();
    let rows = exec
        .map(n_cycles, |j| {
            let mut rng = streams.stream(domain::SANDWICH, j as u64);
            let cycle = sample_busy_cycle(&mut rng, alpha, beta)?;
            let c = &cycle.cluster;
            let (mut lower, mut upper) = (1.0, 1.0);
            for (tau, sigma) in c.service_times().into_iter().zip(c.gaps()) {
                lower *= pot.h(tau, tau).unwrap();
                upper *= pot.h(tau, sigma.min(tau)).unwrap();
            }
            let (f, se, _) = cluster_weight(c.intervals(), pot, n_inner, &mut rng)?;
            Ok((c.len(), lower, upper, f, se))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut violations = 0;
    let mut single_z: f64 = 0.0;
    let mut singles = 0;
    let mut ordering_holds = true;
    let mut gap = RunningStats::default();
    for &(n, lo, up, f, se) in &rows {
        let tol = 3.0 * se + 1e-10 * f.abs();
        if f < lo - tol || f > up + tol {
            violations += 1;
        }
        ordering_holds &= up >= lo * (1.0 - 1e-12);
        gap.push((up / lo).ln());
        if n == 1 {
            singles += 1;
            let z = if se > 0.0 { (f - lo).abs() / se } else if (f - lo).abs() <= 1e-10 * lo { 0.0 } else { f64::INFINITY };
            single_z = single_z.max(z);
        }
    }
    let rate = violations as f64 / n_cycles as f64;
    let violation_rate = Estimate::new(rate, (rate * (1.0 - rate) / n_cycles as f64).sqrt(), n_cycles as u64);
    Ok(SandwichReport {
        alpha,
        n_cycles,
        violations,
        violation_rate,
        single_interval_max_z: single_z,
        single_interval_cycles: singles,
        ordering_holds,
        mean_log_gap: gap.mean(),
    })
}

/// `E[h(τ₁, σ₁∧τ₁)^p]` with `τ₁ ~ Exp(β)` and `σ₁ ~ Exp(α)` independent.
/// The plain average is used; its t-statistic stays asymptotically normal
/// at the borderline tail of the Fröhlich case.
pub fn first_interval_moment<R: Rng + ?Sized>(alpha: f64, pot: &Potential, p: f64, n: usize, rng: &mut R) -> Result<Estimate> {
    require_sandwich(pot)?;
    check(alpha > 0.0 && p > 0.0 && n >= 2, || format!("need alpha > 0, p > 0, n ≥ 2; got {alpha}, {p}, {n}"))?;
    let tau_law = Exp::new(pot.beta()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let sigma_law = Exp::new(alpha).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut s = RunningStats::default();
    for _ in 0..n {
        let tau: f64 = tau_law.sample(rng);
        let sigma: f64 = sigma_law.sample(rng);
        s.push(pot.h(tau, sigma.min(tau)).unwrap().powf(p));
    }
    Ok(s.estimate())
}

/// Symmetric quasiconcave test functions on `ℝ^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum QuasiConcave {
    /// `1{|⟨u, x⟩| ≤ c}` with `|u| = 1`.
    Slab { dir: Vec<f64>, half_width: f64 },
    /// `exp(−xᵀMx/2)`, `M` positive semidefinite (row-major).
    Bump { m: Vec<f64> },
}

impl QuasiConcave {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            QuasiConcave::Slab { dir, half_width } => {
                let p: f64 = dir.iter().zip(x).map(|(a, b)| a * b).sum();
                if p.abs() <= *half_width {
                    1.0
                } else {
                    0.0
                }
            }
            QuasiConcave::Bump { m } => {
                let d = x.len();
                let mut q = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        q += x[i] * m[i * d + j] * x[j];
                    }
                }
                (-0.5 * q).exp()
            }
        }
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

const QUAD_TARGET: f64 = 1e-13;
const QUAD_TOL: f64 = 1e-10;
/// `P(|Z| > 9) < 3e−19`.
const NORMAL_SUPPORT: f64 = 9.0;

fn de(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    quadrature::double_exponential::integrate(f, a, b, QUAD_TARGET).integral
}

/// Bisect until the two halves agree with the whole. Nested box integrals
/// have steep sigmoid transitions when slab directions are nearly
/// dependent, and a single tanh-sinh rule can step over them.
fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (left, right) = (de(f, a, m), de(f, m, b));
    if depth == 0 || (left + right - whole).abs() <= tol {
        return left + right;
    }
    adaptive(f, a, m, left, 0.5 * tol, depth - 1) + adaptive(f, m, b, right, 0.5 * tol, depth - 1)
}

/// `E[∏f_i(X)]`, or `E[∏f_i(X)·|X|²]` when `norm_sq`, for `X ~ N(0, cov)`.
///
/// Bumps fold into the covariance; slabs become a box for the projections,
/// integrated coordinate by coordinate along their Cholesky factor with the
/// innermost coordinate done in closed form.
pub fn gaussian_expectation(cov: &DMatrix<f64>, funcs: &[&QuasiConcave], norm_sq: bool) -> Result<f64> {
    let d = cov.nrows();
    let singular = || Error::Numerical("singular covariance".into());
    let mut prec = cov.clone().try_inverse().ok_or_else(singular)?;
    let mut slabs: Vec<(&Vec<f64>, f64)> = Vec::new();
    for f in funcs {
        match f {
            QuasiConcave::Bump { m } => prec += DMatrix::from_row_slice(d, d, m),
            QuasiConcave::Slab { dir, half_width } => slabs.push((dir, *half_width)),
        }
    }
    let cov2 = prec.try_inverse().ok_or_else(singular)?;
    let factor = (cov2.determinant() / cov.determinant()).sqrt();
    if slabs.is_empty() {
        return Ok(factor * if norm_sq { cov2.trace() } else { 1.0 });
    }
    let k = slabs.len();
    check(k <= d, || format!("{k} slabs in dimension {d} give a degenerate box"))?;
    let u = DMatrix::from_fn(d, k, |i, j| slabs[j].0[i]);
    let s = u.transpose() * &cov2 * &u;
    let l = s.cholesky().ok_or_else(|| Error::Numerical("slab directions are dependent".into()))?.l();
    let widths: Vec<f64> = slabs.iter().map(|s| s.1).collect();
    let quad = if norm_sq {
        let linv = l.clone().try_inverse().ok_or_else(singular)?;
        let g = &cov2 * &u * linv.transpose();
        let t = cov2.trace() - g.norm_squared();
        Some((g, t))
    } else {
        None
    };
    Ok(factor * box_integral(&l, &widths, quad.as_ref(), &[]))
}

fn box_integral(l: &DMatrix<f64>, widths: &[f64], quad: Option<&(DMatrix<f64>, f64)>, prefix: &[f64]) -> f64 {
    let i = prefix.len();
    let k = widths.len();
    let shift: f64 = (0..i).map(|j| l[(i, j)] * prefix[j]).sum();
    let lo = (-widths[i] - shift) / l[(i, i)];
    let hi = (widths[i] - shift) / l[(i, i)];
    if i + 1 < k {
        let (a, b) = (lo.max(-NORMAL_SUPPORT), hi.min(NORMAL_SUPPORT));
        if a >= b {
            return 0.0;
        }
        let f = |z: f64| {
            let mut p = prefix.to_vec();
            p.push(z);
            std_normal_pdf(z) * box_integral(l, widths, quad, &p)
        };
        return adaptive(&f, a, b, de(&f, a, b), QUAD_TOL, 30);
    }
    // ∫_lo^hi (c0 + c1 z + c2 z²) φ(z) dz
    let (c0, c1, c2) = match quad {
        None => (1.0, 0.0, 0.0),
        Some((g, t)) => {
            let q = |z: f64| {
                let mut v = prefix.to_vec();
                v.push(z);
                (g * DVector::from_vec(v)).norm_squared() + t
            };
            let (q0, qp, qm) = (q(0.0), q(1.0), q(-1.0));
            (q0, 0.5 * (qp - qm), 0.5 * (qp + qm) - q0)
        }
    };
    let i0 = normal_cdf(hi) - normal_cdf(lo);
    let i1 = std_normal_pdf(lo) - std_normal_pdf(hi);
    let i2 = i0 + lo * std_normal_pdf(lo) - hi * std_normal_pdf(hi);
    c0 * i0 + c1 * i1 + c2 * i2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCase {
    pub cov: Vec<f64>,
    pub funcs: Vec<QuasiConcave>,
    /// `true` puts a function in the first block of the partition.
    pub partition: Vec<bool>,
}

impl CorrelationCase {
    pub fn dimension(&self) -> usize {
        (self.cov.len() as f64).sqrt().round() as usize
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dimension();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub dimension: usize,
    /// `E[∏f] − E[∏_{J₁}f]·E[∏_{J₂}f]`.
    pub product_margin: f64,
    /// `E[∏f]·E[|X|²] − E[∏f·|X|²]`.
    pub quasiconvex_margin: f64,
    /// Largest `|MC − quadrature|/SE` over the four expectations.
    pub mc_max_z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOptions {
    pub d_max: usize,
    pub n_cases: usize,
    pub n_mc: usize,
    pub tolerance: f64,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self { d_max: 3, n_cases: 1000, n_mc: 2000, tolerance: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_cases: usize,
    pub tolerance: f64,
    pub product_violations: usize,
    pub quasiconvex_violations: usize,
    pub min_product_margin: f64,
    pub min_quasiconvex_margin: f64,
    /// Cases where Monte Carlo and quadrature differ by more than 5 SE.
    pub mc_disagreements: usize,
    pub cases: Vec<CaseResult>,
}

impl CorrelationReport {
    pub fn violations(&self) -> usize {
        self.product_violations + self.quasiconvex_violations
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random covariance, two to four symmetric quasiconcave functions and a
/// random split of them into two blocks.
pub fn random_case<R: Rng + ?Sized>(d_max: usize, rng: &mut R) -> CorrelationCase {
    let d = rng.random_range(1..=d_max);
    let a = DMatrix::from_vec(d, d, normal_vec(rng, d * d));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.2;
    let n_slabs = rng.random_range(0..=d);
    let n_bumps = rng.random_range(0..=2usize).max(2usize.saturating_sub(n_slabs));
    let mut funcs = Vec::new();
    for _ in 0..n_slabs {
        let u = DVector::from_vec(normal_vec(rng, d)).normalize();
        let sd = (u.transpose() * &cov * &u)[(0, 0)].sqrt();
        funcs.push(QuasiConcave::Slab { dir: u.iter().copied().collect(), half_width: rng.random_range(0.2..2.0) * sd });
    }
    for _ in 0..n_bumps {
        let b = DMatrix::from_vec(d, d, normal_vec(rng, d * d));
        let m = &b * b.transpose() * rng.random_range(0.05..1.0);
        funcs.push(QuasiConcave::Bump { m: m.transpose().iter().copied().collect() });
    }
    let n = funcs.len();
    let mut partition: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    partition[0] = true;
    partition[n - 1] = false;
    CorrelationCase { cov: cov.transpose().iter().copied().collect(), funcs, partition }
}

/// Quadrature margins for one case plus a Monte Carlo cross-check.
pub fn check_case<R: Rng + ?Sized>(case: &CorrelationCase, n_mc: usize, rng: &mut R) -> Result<CaseResult> {
    let cov = case.cov_matrix();
    let d = case.dimension();
    let all: Vec<&QuasiConcave> = case.funcs.iter().collect();
    let j1: Vec<&QuasiConcave> = case.funcs.iter().zip(&case.partition).filter(|p| *p.1).map(|p| p.0).collect();
    let j2: Vec<&QuasiConcave> = case.funcs.iter().zip(&case.partition).filter(|p| !*p.1).map(|p| p.0).collect();
    let e_all = gaussian_expectation(&cov, &all, false)?;
    let e1 = gaussian_expectation(&cov, &j1, false)?;
    let e2 = gaussian_expectation(&cov, &j2, false)?;
    let e_q = gaussian_expectation(&cov, &all, true)?;
    let trace = cov.trace();
    let chol = cov.clone().cholesky().ok_or_else(|| Error::Numerical("covariance not positive definite".into()))?.l();
    let mut s = [RunningStats::default(), RunningStats::default(), RunningStats::default(), RunningStats::default()];
    for _ in 0..n_mc {
        let x = &chol * DVector::from_vec(normal_vec(rng, d));
        let x = x.as_slice();
        let prod = |fs: &[&QuasiConcave]| fs.iter().map(|f| f.eval(x)).product::<f64>();
        let pa = prod(&all);
        s[0].push(pa);
        s[1].push(prod(&j1));
        s[2].push(prod(&j2));
        s[3].push(pa * x.iter().map(|v| v * v).sum::<f64>());
    }
    let mc_max_z = s
        .iter()
        .zip([e_all, e1, e2, e_q])
        .map(|(st, q)| {
            let diff = (st.mean() - q).abs();
            if st.se() > 0.0 {
                diff / st.se()
            } else if diff < 1e-9 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok(CaseResult { dimension: d, product_margin: e_all - e1 * e2, quasiconvex_margin: e_all * trace - e_q, mc_max_z })
}

/// Both parts of the Gaussian correlation proposition on random cases.
pub fn correlation_inequality_suite<E: Executor>(opts: &CorrelationOptions, streams: &SeedStreams, exec: &E) -> Result<CorrelationReport> {
    check((1..=3).contains(&opts.d_max), || format!("d_max = {} must lie in 1..=3", opts.d_max))?;
    check(opts.n_cases >= 1 && opts.n_mc >= 2, || "need n_cases ≥ 1 and n_mc ≥ 2".into())?;
    let cases = exec
        .map(opts.n_cases, |i| {
            let mut rng = streams.stream(domain::CORRELATION, i as u64);
            let case = random_case(opts.d_max, &mut rng);
            check_case(&case, opts.n_mc, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let tol = opts.tolerance;
    Ok(CorrelationReport {
        n_cases: opts.n_cases,
        tolerance: tol,
        product_violations: cases.iter().filter(|c| c.product_margin < -tol).count(),
        quasiconvex_violations: cases.iter().filter(|c| c.quasiconvex_margin < -tol).count(),
        min_product_margin: cases.iter().map(|c| c.product_margin).fold(f64::INFINITY, f64::min),
        min_quasiconvex_margin: cases.iter().map(|c| c.quasiconvex_margin).fold(f64::INFINITY, f64::min),
        mc_disagreements: cases.iter().filter(|c| c.mc_max_z > 5.0).count(),
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Sequential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_gc(n: usize, n_inner: usize, n_pool: usize) -> GcOptions {
        GcOptions {
            bold: BoldZOptions { n, n_inner, crossover: 5.0 },
            tilt: TiltOptions { pool: PoolOptions { n_pool, n_inner }, ..Default::default() },
            limit_pool: PoolOptions { n_pool, n_inner },
            min_ess: 100.0,
        }
    }

    #[test]
    fn trivial_scan_is_consistent_good() {
        let pot = Potential::trivial(1.0).unwrap();
        let rep = gc_scan(1.0, &pot, &[2.0, 4.0, 8.0], &small_gc(2000, 2, 20_000), &SeedStreams::new(1), &Sequential).unwrap();
        for r in &rep.rows {
            assert!((r.ratio.value - 1.0).abs() < 1e-12 && r.ratio.se < 1e-12);
            assert!((r.condition4.as_ref().unwrap().value - 1.0).abs() < 1e-6);
        }
        assert_eq!(rep.lambda_status, "root");
        assert_eq!(rep.verdict, Verdict::ConsistentGood, "{rep:?}");
        assert_eq!(rep.bound_violations, 0);
    }

    #[test]
    fn constant_two_ratio_matches_closed_form() {
        // w = 2g: 𝐙_L = e^{c_{α,L/2}}, so 𝐙_{2T}/𝐙_T² = e^{α(1−e^{−βT})²/β}
        let pot = Potential::trivial(1.0).unwrap().shift_by_g(1.0).unwrap();
        let opts = small_gc(20_000, 1, 20_000);
        for t in [1.0, 2.0] {
            let d = dormancy_under_gibbs(1.0, &pot, t, &opts, &SeedStreams::new(2), &Sequential).unwrap();
            let r = d.z_2t.value / d.z_t.value.powi(2);
            let rel = ((d.z_2t.se / d.z_2t.value).powi(2) + 4.0 * (d.z_t.se / d.z_t.value).powi(2)).sqrt();
            let oracle = (1.0 - (-t).exp()).powi(2);
            assert!((r.ln() - oracle).abs() < 3.0 * rel + 1e-3, "T={t}: {r} vs {}", oracle.exp());
            // 𝐙_T = e^{c_{α,T/2}}
            let zc = {
                let h = t / 2.0;
                (2.0 * 1.0 * h - (1.0 - (-2.0 * h).exp())).exp()
            };
            assert!(d.z_t.within(zc, 3.0), "{:?} vs {zc}", d.z_t);
        }
    }

    #[test]
    fn trivial_dormancy_tends_to_stationary_value() {
        let pot = Potential::trivial(1.0).unwrap();
        let opts = small_gc(20_000, 1, 1000);
        let d = dormancy_under_gibbs(1.0, &pot, 12.0, &opts, &SeedStreams::new(3), &Sequential).unwrap();
        let target = (-1.0f64).exp();
        assert!((d.identity.value - target).abs() < 1e-4);
        assert!(d.direct.within(target, 3.0), "{d:?}");
        let tiny = dormancy_under_gibbs(1.0, &pot, 1e-3, &opts, &SeedStreams::new(4), &Sequential).unwrap();
        assert!(tiny.direct.value > 0.99 && tiny.identity.value > 0.99);
    }

    #[test]
    fn frohlich_dormancy_routes_agree() {
        let pot = Potential::frohlich();
        let d = dormancy_under_gibbs(0.5, &pot, 2.0, &small_gc(4000, 20, 1000), &SeedStreams::new(5), &Sequential).unwrap();
        assert!(d.z_distance < 3.0, "{d:?}");
    }

    #[test]
    fn bounded_exponential_ratio_respects_bound() {
        let pot = Potential::bounded_exponential(0.5, 1.0, 1.0).unwrap();
        let opts = GcOptions { tilt: TiltOptions { pool: PoolOptions { n_pool: 2000, n_inner: 20 }, ..Default::default() }, ..small_gc(2000, 20, 2000) };
        let rep = gc_scan(1.0, &pot, &[1.0, 2.0, 4.0], &opts, &SeedStreams::new(6), &Sequential).unwrap();
        let b = rep.ratio_bound.unwrap();
        assert!((b - 0.5f64.exp()).abs() < 1e-12);
        assert_eq!(rep.bound_violations, 0, "{rep:?}");
        assert!(rep.rows.iter().all(|r| r.real_ratio.value <= b + 3.0 * r.real_ratio.se));
    }

    #[test]
    fn sandwich_holds_for_frohlich() {
        let pot = Potential::frohlich();
        let rep = sandwich_suite(0.5, &pot, 400, 200, &SeedStreams::new(7), &Sequential).unwrap();
        assert!(rep.ordering_holds);
        assert!(rep.violation_rate.value <= 0.01, "{rep:?}");
        assert!(rep.single_interval_cycles > 100 && rep.single_interval_max_z < 1e-6, "{rep:?}");
    }

    #[test]
    fn sandwich_refuses_unsupported_potential() {
        let pot = Potential::nelson(0.0, 5.0).unwrap();
        assert!(matches!(sandwich_suite(0.5, &pot, 10, 10, &SeedStreams::new(8), &Sequential), Err(Error::Unsupported(_))));
    }

    #[test]
    fn first_interval_moment_matches_quadrature() {
        // σ∧τ ~ Exp(α+β); oracle by quadrature of h(·, m) against that law
        let pot = Potential::frohlich();
        let (a, b) = (1.0, 1.0);
        let oracle = quadrature::double_exponential::integrate(|u: f64| {
            // m = u² removes the m^{−1/2} singularity
            let m = u * u;
            2.0 * u * (2.0 / (std::f64::consts::PI * m)).sqrt() * (a + b) * (-(a + b) * m).exp()
        }, 0.0, 8.0, 1e-12)
        .integral;
        assert!((oracle - 2.0).abs() < 1e-8);
        let e = first_interval_moment(a, &pot, 1.0, 400_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(e.within(oracle, 3.0), "{e:?}");
    }

    fn slab(dir: Vec<f64>, c: f64) -> QuasiConcave {
        QuasiConcave::Slab { dir, half_width: c }
    }

    #[test]
    fn slab_box_matches_direct_quadrature() {
        let rho: f64 = 0.8;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let (a, b) = (slab(vec![1.0, 0.0], 1.0), slab(vec![0.0, 1.0], 1.0));
        let joint = gaussian_expectation(&cov, &[&a, &b], false).unwrap();
        // ∫_{−1}^{1} φ(x) P(|Y| ≤ 1 | X = x) dx with Y|X ~ N(ρx, 1−ρ²)
        let s = (1.0 - rho * rho).sqrt();
        let direct = quadrature::clenshaw_curtis::integrate(
            |x| std_normal_pdf(x) * (normal_cdf((1.0 - rho * x) / s) - normal_cdf((-1.0 - rho * x) / s)),
            -1.0,
            1.0,
            1e-13,
        )
        .integral;
        assert!((joint - direct).abs() < 1e-10, "{joint} vs {direct}");
        let single = gaussian_expectation(&cov, &[&a], false).unwrap();
        assert!((single - (2.0 * normal_cdf(1.0) - 1.0)).abs() < 1e-14);
        assert!(joint - single * single > 0.05);
    }

    #[test]
    fn independent_components_give_equality() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.7]);
        let f = slab(vec![1.0, 0.0], 0.9);
        let g = QuasiConcave::Bump { m: vec![0.0, 0.0, 0.0, 2.0] };
        let fg = gaussian_expectation(&cov, &[&f, &g], false).unwrap();
        let ef = gaussian_expectation(&cov, &[&f], false).unwrap();
        let eg = gaussian_expectation(&cov, &[&g], false).unwrap();
        assert!((fg - ef * eg).abs() < 1e-12);
        assert!((eg - (1.0f64 / (1.0 + 2.0 * 0.7)).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn norm_square_moment_matches_truncated_normal() {
        // d = 1: E[x² 1{|x| ≤ c}] = (2Φ(c) − 1) − 2cφ(c) for unit variance
        let cov = DMatrix::from_row_slice(1, 1, &[1.0]);
        let c = 0.7;
        let v = gaussian_expectation(&cov, &[&slab(vec![1.0], c)], true).unwrap();
        assert!((v - (2.0 * normal_cdf(c) - 1.0 - 2.0 * c * std_normal_pdf(c))).abs() < 1e-14);
    }

    #[test]
    fn quasiconvex_factor_lowers_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let case = random_case(3, &mut rng);
            let r = check_case(&case, 4000, &mut rng).unwrap();
            assert!(r.quasiconvex_margin > -1e-6 && r.product_margin > -1e-6, "{case:?} {r:?}");
            assert!(r.mc_max_z < 5.5, "{case:?} {r:?}");
        }
    }

    #[test]
    fn correlation_suite_is_deterministic_and_clean() {
        let opts = CorrelationOptions { n_cases: 60, n_mc: 500, ..Default::default() };
        let a = correlation_inequality_suite(&opts, &SeedStreams::new(11), &Sequential).unwrap();
        let b = correlation_inequality_suite(&opts, &SeedStreams::new(11), &Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.violations(), 0);
    }

    #[test]
    fn nearly_dependent_slabs_match_monte_carlo() {
        let case = CorrelationCase {
            cov: vec![2.3566, -1.1974, 2.8035, -1.1974, 1.8221, -0.6952, 2.8035, -0.6952, 4.9055],
            funcs: vec![
                slab(vec![-0.601307, -0.769479, 0.215249], 0.617456),
                slab(vec![-0.079636, -0.934852, 0.345992], 2.587743),
                slab(vec![-0.912191, 0.313335, -0.264062], 0.551757),
            ],
            partition: vec![true, false, false],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let r = check_case(&case, 400_000, &mut rng).unwrap();
        assert!(r.mc_max_z < 4.0, "{r:?}");
        assert!(r.product_margin > -1e-6, "{r:?}");
    }
}
