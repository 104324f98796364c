//! The tilting equation `Λ(λ) = E[e^{−λT₁}F(ξ₁)] = 1`, the free energy
//! `ψ = α + λ*`, the tilted cycle law and the limiting partition-function
//! constant.
//!
//! Everything runs on a frozen [`CyclePool`]: raw cycles with one unbiased
//! `F̂` each. On a fixed pool `Λ̂` is deterministic and strictly decreasing, so
//! the root is found by plain bisection.
//!
//! The dormant period is independent of the cluster and `E[e^{−λd}] = α/(α+λ)`,
//! so pool averages integrate it out analytically.

use crate::cluster::{expected_cycle_length, sample_busy_cycle, sample_poisson_configuration, Cycle};
use crate::error::{check, Error, Result};
use crate::estimate::{ratio_estimate, Estimate, RunningStats};
use crate::exec::Executor;
use crate::gaussian::{estimate_f, FMethod};
use crate::potentials::Potential;
use crate::renewal::{sample_queue_path, CycleSource, QueueCycles};
use crate::rng::{domain, SeedStreams};
use crate::stats::{weighted_linear_fit, weights_ess, LinearFit};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

/// Determinant mixture where marks exist, plain Brownian averaging otherwise.
pub fn default_f_method(pot: &Potential) -> FMethod {
    if pot.completely_monotone() {
        FMethod::Mixture
    } else {
        FMethod::Plain
    }
}

/// `F̂` for a set of intervals; zero inner samples are never requested.
pub fn cluster_weight<R: Rng + ?Sized>(intervals: &[crate::cluster::Interval], pot: &Potential, n_inner: usize, rng: &mut R) -> Result<(f64, f64, bool)> {
    let f = estimate_f(intervals, pot, n_inner.max(1), rng, default_f_method(pot))?;
    Ok((f.estimate.value, f.estimate.se, f.divergent))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub cycle: Cycle,
    pub f: f64,
    pub f_se: f64,
    pub f_divergent: bool,
}

impl PoolEntry {
    pub fn active(&self) -> f64 {
        self.cycle.cluster.active_length()
    }

    pub fn customers(&self) -> usize {
        self.cycle.cluster.len()
    }
}

/// Largest share of absolute tilting weight negative `F̂` entries may carry.
pub const NEGATIVE_SHARE_LIMIT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolOptions {
    pub n_pool: usize,
    pub n_inner: usize,
}

impl Default for PoolOptions {
    fn default() -> Self {
        Self { n_pool: 100_000, n_inner: 1000 }
    }
}

/// Raw cycles with frozen `F̂`. Entry `j` always comes from stream
/// `(POOL, j)`, so pools for different α share random numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CyclePool {
    alpha: f64,
    beta: f64,
    entries: Vec<PoolEntry>,
    active: Vec<f64>,
    f: Vec<f64>,
}

impl CyclePool {
    pub fn build<E: Executor>(alpha: f64, pot: &Potential, opts: PoolOptions, streams: &SeedStreams, exec: &E) -> Result<Self> {
        check(alpha > 0.0 && alpha.is_finite(), || format!("alpha = {alpha} must be positive"))?;
        check(opts.n_pool >= 2 && opts.n_inner >= 1, || "pool needs n_pool ≥ 2 and n_inner ≥ 1".into())?;
        let beta = pot.beta();
        let entries = exec
            .map(opts.n_pool, |j| {
                let mut rng = streams.stream(domain::POOL, j as u64);
                let cycle = sample_busy_cycle(&mut rng, alpha, beta)?;
                let (f, f_se, f_divergent) = cluster_weight(cycle.cluster.intervals(), pot, opts.n_inner, &mut rng)?;
                Ok(PoolEntry { cycle, f, f_se, f_divergent })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(alpha, beta, entries))
    }

    pub fn from_entries(alpha: f64, beta: f64, entries: Vec<PoolEntry>) -> Self {
        let active = entries.iter().map(PoolEntry::active).collect();
        let f = entries.iter().map(|e| e.f).collect();
        Self { alpha, beta, entries, active, f }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Share of entries whose inner `F̂` looked unstable.
    pub fn divergent_fraction(&self) -> f64 {
        self.entries.iter().filter(|e| e.f_divergent).count() as f64 / self.len() as f64
    }

    fn check_lambda(&self, lambda: f64) -> Result<()> {
        check(lambda > -self.alpha, || format!("lambda = {lambda} ≤ −alpha: dormant factor not integrable"))
    }

    /// Per-entry `α/(α+λ)·e^{−λa_j}F̂_j`.
    pub fn terms(&self, lambda: f64) -> Result<Vec<f64>> {
        self.check_lambda(lambda)?;
        let c = self.alpha / (self.alpha + lambda);
        Ok(self.active.iter().zip(&self.f).map(|(a, f)| c * (-lambda * a).exp() * f).collect())
    }

    pub fn big_lambda(&self, lambda: f64) -> Result<Estimate> {
        let terms = self.terms(lambda)?;
        let mut s = RunningStats::default();
        terms.iter().for_each(|&t| s.push(t));
        let mut e = s.estimate();
        if self.len() >= 100 && s.max_share() > 0.5 {
            e = e.flag("unstable-running-mean");
        }
        if self.divergent_fraction() > 0.01 {
            e = e.flag("inner-f-unstable");
        }
        Ok(e)
    }

    /// `F > 0` always, but a plain estimate of a sign-changing `v` can come
    /// out negative. Refuse when such entries carry more than `limit` of the
    /// absolute weight at `λ`.
    pub fn check_sign(&self, lambda: f64, limit: f64) -> Result<()> {
        let terms = self.terms(lambda)?;
        let negative = terms.iter().filter(|&&t| t < 0.0).count();
        let neg: f64 = terms.iter().filter(|&&t| t < 0.0).map(|t| -t).sum();
        let abs: f64 = terms.iter().map(|t| t.abs()).sum();
        let share = if abs > 0.0 { neg / abs } else { 0.0 };
        if share > limit {
            return Err(Error::SignIndefinite { negative, share });
        }
        Ok(())
    }

    /// `Λ̂` and `dΛ̂/dλ` over a multiset of indices.
    pub(crate) fn value_and_slope(&self, lambda: f64, idx: Option<&[usize]>) -> (f64, f64) {
        let k = self.alpha + lambda;
        let c = self.alpha / k;
        let term = |j: usize| {
            let a = self.active[j];
            let v = c * (-lambda * a).exp() * self.f[j];
            (v, -v * (a + 1.0 / k))
        };
        let (mut s, mut ds, n) = match idx {
            Some(ix) => ix.iter().fold((0.0, 0.0, ix.len()), |acc, &j| {
                let (v, dv) = term(j);
                (acc.0 + v, acc.1 + dv, acc.2)
            }),
            None => (0..self.len()).fold((0.0, 0.0, self.len()), |acc, j| {
                let (v, dv) = term(j);
                (acc.0 + v, acc.1 + dv, acc.2)
            }),
        };
        s /= n as f64;
        ds /= n as f64;
        (s, ds)
    }
}

/// Pool-average estimate of `Λ(λ)` from `n` fresh cycles.
pub fn estimate_big_lambda<E: Executor>(alpha: f64, pot: &Potential, lambda: f64, opts: PoolOptions, streams: &SeedStreams, exec: &E) -> Result<Estimate> {
    check(lambda > -alpha, || format!("lambda = {lambda} ≤ −alpha: dormant factor not integrable"))?;
    let pool = CyclePool::build(alpha, pot, opts, streams, exec)?;
    Ok(pool.big_lambda(lambda)?.with_seed(streams.root()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub bootstrap: usize,
    pub lower_offset: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-10, bootstrap: 200, lower_offset: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolution {
    pub lambda_star: f64,
    /// Delta-method standard error.
    pub se: f64,
    /// 95% percentile bootstrap interval over pool entries.
    pub ci: (f64, f64),
    pub big_lambda_at_root: Estimate,
    pub bracket: (f64, f64),
}

fn bisect(lo: f64, hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    while hi - lo > tol * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Root of `Λ̂(λ) = 1` on the frozen pool.
pub fn solve_lambda(pool: &CyclePool, opts: SolveOptions, streams: &SeedStreams) -> Result<LambdaSolution> {
    check(opts.tol > 0.0, || "tol must be positive".into())?;
    let alpha = pool.alpha();
    let g = |l: f64| pool.value_and_slope(l, None).0 - 1.0;
    let lo = -alpha + opts.lower_offset;
    pool.check_sign(lo, NEGATIVE_SHARE_LIMIT)?;
    if g(lo) < 0.0 {
        return Err(Error::NoRoot(format!("Λ̂ < 1 already at λ = {lo:.4}; growth condition plausibly fails")));
    }
    let mut hi = alpha + 10.0;
    let mut expansions = 0;
    while g(hi) > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 40 || !hi.is_finite() {
            return Err(Error::NoRoot("Λ̂ > 1 on the whole bracket".into()));
        }
    }
    let root = bisect(lo, hi, opts.tol, g);
    pool.check_sign(root, NEGATIVE_SHARE_LIMIT)?;
    let big = pool.big_lambda(root)?;
    let (_, slope) = pool.value_and_slope(root, None);
    let se = if slope != 0.0 { big.se / slope.abs() } else { f64::INFINITY };
    let mut boots = Vec::with_capacity(opts.bootstrap);
    let n = pool.len();
    for b in 0..opts.bootstrap {
        let mut rng = streams.stream(domain::BOOTSTRAP, b as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        boots.push(resolve(pool, &idx, root, lo, hi, opts.tol));
    }
    boots.sort_by(|a, b| a.total_cmp(b));
    let ci = if boots.is_empty() {
        (root - 1.96 * se, root + 1.96 * se)
    } else {
        (crate::stats::quantile_sorted(&boots, 0.025), crate::stats::quantile_sorted(&boots, 0.975))
    };
    Ok(LambdaSolution { lambda_star: root, se, ci, big_lambda_at_root: big, bracket: (lo, hi) })
}

/// Newton from the full-pool root, bisection if Newton leaves the bracket.
pub(crate) fn resolve(pool: &CyclePool, idx: &[usize], start: f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let mut l = start;
    for _ in 0..50 {
        let (v, dv) = pool.value_and_slope(l, Some(idx));
        if dv >= 0.0 || !v.is_finite() {
            break;
        }
        let next = l - (v - 1.0) / dv;
        if !(next > lo && next < hi) {
            break;
        }
        if (next - l).abs() <= tol * (1.0 + l.abs()) {
            return next;
        }
        l = next;
    }
    let g = |x: f64| pool.value_and_slope(x, Some(idx)).0 - 1.0;
    if g(lo) < 0.0 {
        return lo;
    }
    if g(hi) > 0.0 {
        return hi;
    }
    bisect(lo, hi, tol, g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltOptions {
    pub pool: PoolOptions,
    pub solve: SolveOptions,
    /// Refuse when the resampling ESS falls below this.
    pub min_ess: f64,
    /// Refuse when one entry carries more than this share of the weight.
    pub max_weight_share: f64,
    /// Refuse when `|Λ̂(λ) − 1|` exceeds this many SE (plus `1e−6`).
    pub normalization_z: f64,
}

impl Default for TiltOptions {
    fn default() -> Self {
        Self { pool: PoolOptions::default(), solve: SolveOptions::default(), min_ess: 100.0, max_weight_share: 0.1, normalization_z: 4.0 }
    }
}

/// `Exp(α+λ) ⊗ Ξ̂` with `Ξ̂ ∝ e^{−λa}F Ξ`, realised by resampling the pool.
#[derive(Clone, Debug)]
pub struct TiltedLaw {
    pool: CyclePool,
    lambda: f64,
    solution: Option<LambdaSolution>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
    ess: f64,
    max_share: f64,
    mean_active: Estimate,
    mean_customers: Estimate,
}

impl TiltedLaw {
    pub fn solve<E: Executor>(alpha: f64, pot: &Potential, opts: TiltOptions, streams: &SeedStreams, exec: &E) -> Result<Self> {
        let pool = CyclePool::build(alpha, pot, opts.pool, streams, exec)?;
        let sol = solve_lambda(&pool, opts.solve, streams)?;
        let mut law = Self::at_lambda(pool, sol.lambda_star, opts)?;
        law.solution = Some(sol);
        Ok(law)
    }

    /// Tilt at a given `λ`. Resampling self-normalizes, so a `λ` with
    /// `Λ̂(λ)` away from 1 would silently give the wrong law; it is refused.
    pub fn at_lambda(pool: CyclePool, lambda: f64, opts: TiltOptions) -> Result<Self> {
        check(lambda > -pool.alpha(), || format!("lambda = {lambda} ≤ −alpha"))?;
        let mass = pool.big_lambda(lambda)?;
        if (mass.value - 1.0).abs() > opts.normalization_z * mass.se + 1e-6 {
            return Err(Error::NotNormalized { mass: mass.value });
        }
        pool.check_sign(lambda, NEGATIVE_SHARE_LIMIT)?;
        let raw: Vec<f64> = pool.terms(lambda)?.into_iter().map(|w| w.max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::LowEss { ess: 0.0, floor: opts.min_ess });
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let ess = weights_ess(&weights);
        let max_share = weights.iter().cloned().fold(0.0, f64::max);
        if ess < opts.min_ess || max_share > opts.max_weight_share {
            return Err(Error::LowEss { ess, floor: opts.min_ess });
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        let a: Vec<f64> = pool.active.clone();
        let n: Vec<f64> = pool.entries.iter().map(|e| e.customers() as f64).collect();
        let mean_active = ratio_estimate(&raw.iter().zip(&a).map(|(w, a)| w * a).collect::<Vec<_>>(), &raw);
        let mean_customers = ratio_estimate(&raw.iter().zip(&n).map(|(w, n)| w * n).collect::<Vec<_>>(), &raw);
        Ok(Self { pool, lambda, solution: None, weights, cumulative, ess, max_share, mean_active, mean_customers })
    }

    pub fn alpha(&self) -> f64 {
        self.pool.alpha()
    }

    pub fn beta(&self) -> f64 {
        self.pool.beta()
    }

    pub fn lambda_star(&self) -> f64 {
        self.lambda
    }

    pub fn psi(&self) -> f64 {
        self.alpha() + self.lambda
    }

    pub fn solution(&self) -> Option<&LambdaSolution> {
        self.solution.as_ref()
    }

    pub fn pool(&self) -> &CyclePool {
        &self.pool
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ess(&self) -> f64 {
        self.ess
    }

    pub fn max_weight_share(&self) -> f64 {
        self.max_share
    }

    /// Rate of the tilted dormant periods.
    pub fn dormant_rate(&self) -> f64 {
        self.alpha() + self.lambda
    }

    /// `Ê[â₁]`
    pub fn mean_active(&self) -> Estimate {
        self.mean_active.clone()
    }

    /// `Ê[T̂₁] = 1/(α+λ) + Ê[â₁]`
    pub fn mean_total(&self) -> Estimate {
        let a = &self.mean_active;
        Estimate::new(a.value + 1.0 / self.dormant_rate(), a.se, a.n)
    }

    /// `Ê[N̂₁]`
    pub fn mean_customers(&self) -> Estimate {
        self.mean_customers.clone()
    }

    /// Index of a pool entry drawn with the tilted weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cumulative.partition_point(|&c| c <= u).min(self.weights.len() - 1)
    }

    pub fn sample_tilted_cycle<R: Rng + ?Sized>(&self, rng: &mut R) -> Cycle {
        let e: f64 = Exp1.sample(rng);
        let j = self.sample_index(rng);
        Cycle { dormant: e / self.dormant_rate(), cluster: self.pool.entries[j].cycle.cluster.clone() }
    }
}

impl CycleSource for TiltedLaw {
    fn sample_cycle<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Cycle> {
        Ok(self.sample_tilted_cycle(rng))
    }

    fn mean_cycle_length(&self) -> Option<f64> {
        Some(self.mean_total().value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitConstant {
    /// `(α/(α+λ))·E[T₁]/Ê[T̂₁]`, from the tilted pool.
    pub renewal_form: Estimate,
    /// `α E[T₁]/(ψ E[T₁e^{−λT₁}F])`, from fresh raw cycles.
    pub free_energy_form: Estimate,
    /// `1/(ψ E[T₁e^{−λT₁}F])`, the same constant for the unnormalized `Z`.
    pub real_z_form: Estimate,
    pub z_distance: f64,
}

/// Both expressions for `lim 𝐙_t e^{−λ* t}`. The second one averages over
/// `opts.n_pool` fresh cycles, independent of the tilting pool.
pub fn limit_constant<E: Executor>(tilted: &TiltedLaw, pot: &Potential, opts: PoolOptions, streams: &SeedStreams, exec: &E) -> Result<LimitConstant> {
    let alpha = tilted.alpha();
    let lambda = tilted.lambda_star();
    let psi = tilted.psi();
    let et1 = expected_cycle_length(alpha, tilted.beta());
    let tt = tilted.mean_total();
    let r1 = alpha / psi * et1 / tt.value;
    let renewal_form = Estimate::new(r1, r1 * tt.se / tt.value, tt.n);
    let beta = tilted.beta();
    let ys = exec
        .map(opts.n_pool, |j| {
            let mut rng = streams.stream(domain::LIMIT, j as u64);
            let c = sample_busy_cycle(&mut rng, alpha, beta)?;
            let (f, _, _) = cluster_weight(c.cluster.intervals(), pot, opts.n_inner, &mut rng)?;
            let a = c.cluster.active_length();
            // E_d[(d+a)e^{−λ(d+a)}] = α/(α+λ)·e^{−λa}(a + 1/(α+λ))
            Ok(f * (-lambda * a).exp() * alpha / psi * (a + 1.0 / psi))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let m = Estimate::from_samples(&ys);
    let real = 1.0 / (psi * m.value);
    let real_z_form = Estimate::new(real, real * m.se / m.value, m.n);
    let bold = alpha * et1 * real;
    let free_energy_form = Estimate::new(bold, bold * m.se / m.value, m.n);
    let z_distance = renewal_form.z_distance(&free_energy_form);
    Ok(LimitConstant { renewal_form, free_energy_form, real_z_form, z_distance })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoldZOptions {
    pub n: usize,
    pub n_inner: usize,
    /// Window length up to which Poisson configurations are used.
    pub crossover: f64,
}

impl Default for BoldZOptions {
    fn default() -> Self {
        Self { n: 10_000, n_inner: 200, crossover: 5.0 }
    }
}

/// `𝐙_t = E[∏ F(ξ)]` over the clusters of a configuration on a window of
/// length `t` whose ends are dormant. Short windows sample the Poisson
/// configuration, long ones run queue cycles from an empty start and keep the
/// paths that are dormant at `t`.
pub fn estimate_bold_z<E: Executor>(alpha: f64, pot: &Potential, window: f64, opts: BoldZOptions, streams: &SeedStreams, exec: &E) -> Result<Estimate> {
    let ys = bold_z_draws(alpha, pot, window, opts, streams, exec)?;
    let mut s = RunningStats::default();
    ys.iter().for_each(|&(y, _)| s.push(y));
    let mut e = s.estimate().with_seed(streams.root());
    if s.max_share() > 0.5 {
        e = e.flag("unstable-running-mean");
    }
    Ok(e)
}

/// Draws behind [`estimate_bold_z`]: the product of cluster weights of one
/// configuration of `Γ_{α,window/2}` and whether it is dormant at the midpoint.
pub(crate) fn bold_z_draws<E: Executor>(alpha: f64, pot: &Potential, window: f64, opts: BoldZOptions, streams: &SeedStreams, exec: &E) -> Result<Vec<(f64, bool)>> {
    check(window > 0.0 && window.is_finite(), || format!("window = {window} must be positive"))?;
    check(opts.n >= 2, || "need n ≥ 2".into())?;
    let beta = pot.beta();
    let source = QueueCycles::exponential(alpha, beta);
    exec.map(opts.n, |j| {
        let mut rng = streams.stream(domain::BOLD_Z, j as u64);
        let (clusters, mid_dormant): (Vec<Vec<crate::cluster::Interval>>, bool) = if window <= opts.crossover {
            let c = sample_poisson_configuration(&mut rng, alpha, window / 2.0, beta)?;
            (c.clusters.iter().map(|p| p.cluster.intervals().to_vec()).collect(), c.is_dormant_at(0.0))
        } else {
            loop {
                let p = sample_queue_path(&mut rng, &source, 0.0, window)?;
                if p.is_dormant_at(window) {
                    let cl = p.cycles.iter().filter(|c| c.cluster_offset() < window).map(|c| c.cycle.cluster.intervals().to_vec()).collect();
                    break (cl, p.is_dormant_at(window / 2.0));
                }
            }
        };
        let mut prod = 1.0;
        for iv in &clusters {
            prod *= cluster_weight(iv, pot, opts.n_inner, &mut rng)?.0;
        }
        Ok((prod, mid_dormant))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiDirect {
    pub psi: Estimate,
    pub fit: LinearFit,
    /// `(window, log 𝐙̂_window)` with delta-method SE.
    pub log_z: Vec<(f64, Estimate)>,
    /// Triples `s + t = u` in the window list where `log 𝐙_u < log 𝐙_s + log 𝐙_t` beyond 3 SE.
    pub superadditivity_violations: usize,
    pub flags: Vec<String>,
}

/// `ψ` from the growth of `log 𝐙̂_{2T}` in `2T`: slope plus `α`.
pub fn estimate_psi_direct<E: Executor>(alpha: f64, pot: &Potential, t_list: &[f64], opts: BoldZOptions, streams: &SeedStreams, exec: &E) -> Result<PsiDirect> {
    check(t_list.len() >= 3, || "need at least three T values".into())?;
    check(t_list.windows(2).all(|w| w[0] < w[1]) && t_list[0] > 0.0, || "T list must be positive and increasing".into())?;
    let mut log_z = Vec::new();
    let mut flags = Vec::new();
    for (i, &t) in t_list.iter().enumerate() {
        let z = estimate_bold_z(alpha, pot, 2.0 * t, opts, &streams.child(i as u64), exec)?;
        if !(z.value > 0.0) {
            return Err(Error::Numerical(format!("𝐙 estimate {} at T = {t} is not positive", z.value)));
        }
        let rel = z.se / z.value;
        if rel > 0.2 {
            flags.push(format!("noise-dominated at T={t}: relative SE {rel:.2}"));
        }
        log_z.push((2.0 * t, Estimate::new(z.value.ln(), rel, z.n)));
    }
    let x: Vec<f64> = log_z.iter().map(|p| p.0).collect();
    let y: Vec<f64> = log_z.iter().map(|p| p.1.value).collect();
    let sd: Vec<f64> = log_z.iter().map(|p| p.1.se.max(1e-12)).collect();
    let fit = weighted_linear_fit(&x, &y, &sd);
    let mut violations = 0;
    for i in 0..x.len() {
        for j in i..x.len() {
            if let Some(k) = x.iter().position(|&u| (u - x[i] - x[j]).abs() < 1e-9 * (1.0 + u)) {
                let gap = y[k] - y[i] - y[j];
                let se = (sd[k].powi(2) + sd[i].powi(2) + sd[j].powi(2)).sqrt();
                if gap < -3.0 * se {
                    violations += 1;
                }
            }
        }
    }
    Ok(PsiDirect {
        psi: Estimate::new(fit.slope + alpha, fit.slope_se, x.len() as u64).with_seed(streams.root()),
        fit,
        log_z,
        superadditivity_violations: violations,
        flags,
    })
}

/// `E[z^N]` for the number of customers in one busy cluster.
pub fn pgf_customer_count<R: Rng + ?Sized>(alpha: f64, beta: f64, z: f64, n: usize, rng: &mut R) -> Result<Estimate> {
    check(z >= 0.0 && z.is_finite(), || format!("z = {z} must be ≥ 0"))?;
    check(n >= 2, || "need n ≥ 2".into())?;
    let mut s = RunningStats::default();
    for _ in 0..n {
        let c = sample_busy_cycle(rng, alpha, beta)?;
        s.push(z.powi(c.cluster.len() as i32));
    }
    let mut e = s.estimate();
    if pgf_unstable(&s) {
        e = e.flag("divergent");
    }
    Ok(e)
}

fn pgf_unstable(s: &RunningStats) -> bool {
    s.max_share() > 0.05 || s.se() > 0.1 * s.mean()
}

/// Smallest `z` on an increasing grid where the running mean of `z^N`
/// destabilizes, the empirical stand-in for the radius of convergence. Every
/// grid point reuses the same cycles.
pub fn pgf_divergence_threshold(alpha: f64, beta: f64, z_grid: &[f64], n: usize, streams: &SeedStreams) -> Result<Option<f64>> {
    check(z_grid.windows(2).all(|w| w[0] < w[1]), || "z grid must increase".into())?;
    let mut rng = streams.stream(domain::PGF, 0);
    let counts: Vec<i32> = (0..n).map(|_| sample_busy_cycle(&mut rng, alpha, beta).map(|c| c.cluster.len() as i32)).collect::<Result<_>>()?;
    for &z in z_grid {
        let mut s = RunningStats::default();
        counts.iter().for_each(|&k| s.push(z.powi(k)));
        if pgf_unstable(&s) {
            return Ok(Some(z));
        }
    }
    Ok(None)
}
