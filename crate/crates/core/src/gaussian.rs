//! Brownian linear algebra over cluster intervals.
//!
//! The increments `X_i = X_{s_i,t_i}` of a Brownian motion are jointly
//! Gaussian with covariance `C_ij = |[s_i,t_i] ∩ [s_j,t_j]|` per coordinate.
//! Cutting the time axis at every endpoint gives independent elementary
//! segments, so `C = A diag(ℓ) Aᵀ` with 0/1 incidence `A`; joint draws sum
//! segment increments and never factor `C`.
//!
//! For completely monotone potentials `v = ∫ e^{−u²|x|²/2} μ(du)`, so
//! `F(ξ) = ∫ det(I + C diag(u²))^{−d/2} ∏ μ_i(du_i)`, an integral over marks.
//! Marks are drawn from the single-interval posteriors `q_i ∝ μ_i(du)(1+u²ℓ_i)^{−d/2}`.

use crate::cluster::Interval;
use crate::error::{check, Error, Result};
use crate::estimate::Estimate;
use crate::potentials::{BernsteinMeasure, Potential};
use crate::stats::chain_ess;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const EIGEN_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementCovariance {
    intervals: Vec<Interval>,
    matrix: DMatrix<f64>,
}

impl IncrementCovariance {
    pub fn new(intervals: &[Interval]) -> Result<Self> {
        for iv in intervals {
            check(iv.start < iv.end, || format!("empty interval {iv:?}"))?;
        }
        let n = intervals.len();
        let matrix = DMatrix::from_fn(n, n, |i, j| intervals[i].overlap(&intervals[j]));
        Ok(Self { intervals: intervals.to_vec(), matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    /// `B` with `B Bᵀ = C`: Cholesky, or a clamped spectral root when `C`
    /// is numerically singular (nested or chained intervals).
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        if let Some(ch) = Cholesky::new(self.matrix.clone()) {
            let l = ch.l();
            if l.diagonal().iter().all(|&x| x > EIGEN_TOL.sqrt() * self.scale()) {
                return l;
            }
        }
        let eig = SymmetricEigen::new(self.matrix.clone());
        let mut b = eig.eigenvectors.clone();
        for (j, &lam) in eig.eigenvalues.iter().enumerate() {
            let s = if lam > EIGEN_TOL * self.scale() { lam.sqrt() } else { 0.0 };
            b.column_mut(j).scale_mut(s);
        }
        b
    }

    fn scale(&self) -> f64 {
        self.matrix.diagonal().iter().copied().fold(1.0, f64::max)
    }
}

/// Elementary segments between consecutive breakpoints and, per interval,
/// the half-open range of segments it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub points: Vec<f64>,
    pub lengths: Vec<f64>,
    pub ranges: Vec<(usize, usize)>,
}

impl Segmentation {
    pub fn new(intervals: &[Interval], extra: &[f64]) -> Self {
        let mut points: Vec<f64> = intervals.iter().flat_map(|iv| [iv.start, iv.end]).chain(extra.iter().copied()).collect();
        points.sort_by(|a, b| a.total_cmp(b));
        points.dedup();
        let lengths = points.windows(2).map(|w| w[1] - w[0]).collect();
        let idx = |t: f64| points.binary_search_by(|p| p.total_cmp(&t)).expect("breakpoint present");
        let ranges = intervals.iter().map(|iv| (idx(iv.start), idx(iv.end))).collect();
        Self { points, lengths, ranges }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Independent `N(0, ℓ_k I_d)` segment increments.
    fn brownian<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
        self.lengths
            .iter()
            .map(|&l| {
                let s = l.sqrt();
                (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect()
    }

    fn interval_sums(&self, x: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
        self.ranges
            .iter()
            .map(|&(lo, hi)| {
                let mut s = vec![0.0; d];
                for xk in &x[lo..hi] {
                    for c in 0..d {
                        s[c] += xk[c];
                    }
                }
                s
            })
            .collect()
    }
}

/// `E_𝒲[exp(−½ Σ u_i² |X_i|²)] = det(I + C diag(u²))^{−d/2}`, as a logarithm.
pub fn log_gaussian_quadratic_expectation(cov: &DMatrix<f64>, u: &[f64], d: usize) -> Result<f64> {
    let n = u.len();
    let s = DMatrix::from_fn(n, n, |i, j| (i == j) as u8 as f64 + u[i] * cov[(i, j)] * u[j]);
    let ch = Cholesky::new(s).ok_or_else(|| Error::Numerical("I + U C U not positive definite".into()))?;
    let logdet: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(Error::Numerical("non-finite determinant".into()));
    }
    Ok(-0.5 * d as f64 * logdet)
}

pub fn gaussian_quadratic_expectation(intervals: &[Interval], u: &[f64], d: usize) -> Result<f64> {
    check(intervals.len() == u.len(), || "one mark per interval".into())?;
    check(u.iter().all(|&x| x >= 0.0 && x.is_finite()), || "marks must be finite and ≥ 0".into())?;
    let cov = IncrementCovariance::new(intervals)?;
    Ok(log_gaussian_quadratic_expectation(cov.matrix(), u, d)?.exp())
}

/// Single-interval mark posterior `q ∝ μ(du)(1+u²ℓ)^{−d/2}`.
#[derive(Clone, Debug)]
struct MarkProposal {
    atoms: Vec<(f64, f64)>,
    continuous_mass: f64,
    total: f64,
    ell: f64,
    d: usize,
}

impl MarkProposal {
    fn new(m: &BernsteinMeasure, ell: f64, d: usize) -> Result<Self> {
        if m.continuous > 0.0 && d != 3 {
            return Err(Error::Unsupported("continuous mark measure needs d = 3".into()));
        }
        let atoms: Vec<(f64, f64)> = m.atoms.iter().map(|&(u, w)| (u, w * (1.0 + u * u * ell).powf(-(d as f64) / 2.0))).collect();
        let continuous_mass = m.continuous / ell.sqrt();
        let total = atoms.iter().map(|a| a.1).sum::<f64>() + continuous_mass;
        Ok(Self { atoms, continuous_mass, total, ell, d })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut x = rng.random::<f64>() * self.total;
        for &(u, m) in &self.atoms {
            if x < m {
                return u;
            }
            x -= m;
        }
        // CDF of t = u√ℓ is t/√(1+t²)
        let p: f64 = rng.random();
        let t = p / (1.0 - p * p).sqrt();
        t / self.ell.sqrt()
    }

    fn log_single(&self, u: f64) -> f64 {
        -(self.d as f64) / 2.0 * (u * u * self.ell).ln_1p()
    }

    fn is_deterministic(&self) -> bool {
        self.continuous_mass == 0.0 && self.atoms.len() == 1
    }
}

fn proposals(intervals: &[Interval], pot: &Potential) -> Result<Vec<MarkProposal>> {
    intervals
        .iter()
        .map(|iv| {
            let m = pot
                .bernstein(iv.len())
                .ok_or_else(|| Error::Unsupported(format!("{} is not completely monotone", pot.key())))?;
            MarkProposal::new(&m, iv.len(), pot.dimension())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FMethod {
    Plain,
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FEstimate {
    pub estimate: Estimate,
    pub log_value: f64,
    pub rejected: u64,
    pub divergent: bool,
}

/// Mean and SE of `Σ sign_j e^{l_j}` / n computed around the largest log term.
fn log_space_mean(logs: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let n = logs.len() as f64;
    let m = logs.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return (0.0, 0.0, f64::NEG_INFINITY, 0.0);
    }
    let scaled: Vec<f64> = logs.iter().map(|&(s, l)| s * (l - m).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    let var = if logs.len() > 1 { scaled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let abs_sum: f64 = scaled.iter().map(|x| x.abs()).sum();
    let max_share = if abs_sum > 0.0 { 1.0 / abs_sum } else { 0.0 };
    let se = (var / n).sqrt();
    let log_mean = m + mean.abs().ln();
    let scale = m.exp();
    (mean * scale, se * scale, log_mean, max_share)
}

/// Estimate `F = E_𝒲[∏ v(t_i − s_i, X_{s_i,t_i})]` for any finite set of intervals.
pub fn estimate_f<R: Rng + ?Sized>(intervals: &[Interval], pot: &Potential, n_samples: usize, rng: &mut R, method: FMethod) -> Result<FEstimate> {
    check(n_samples >= 1, || "n_samples must be ≥ 1".into())?;
    check(!intervals.is_empty(), || "no intervals".into())?;
    let d = pot.dimension();
    match method {
        FMethod::Mixture => {
            let props = proposals(intervals, pot)?;
            let log_mass: f64 = props.iter().map(|p| p.total.ln()).sum();
            if intervals.len() == 1 || props.iter().all(MarkProposal::is_deterministic) {
                let cov = IncrementCovariance::new(intervals)?;
                let log_f = if intervals.len() == 1 {
                    log_mass
                } else {
                    let u: Vec<f64> = props.iter().map(|p| p.atoms[0].0).collect();
                    log_mass + log_gaussian_quadratic_expectation(cov.matrix(), &u, d)? - props.iter().zip(&u).map(|(p, &u)| p.log_single(u)).sum::<f64>()
                };
                return Ok(FEstimate {
                    estimate: Estimate::new(log_f.exp(), 0.0, n_samples as u64),
                    log_value: log_f,
                    rejected: 0,
                    divergent: false,
                });
            }
            let cov = IncrementCovariance::new(intervals)?;
            let mut logs = Vec::with_capacity(n_samples);
            let mut u = vec![0.0; intervals.len()];
            for _ in 0..n_samples {
                let mut l = log_mass;
                for (ui, p) in u.iter_mut().zip(&props) {
                    *ui = p.sample(rng);
                    l -= p.log_single(*ui);
                }
                l += log_gaussian_quadratic_expectation(cov.matrix(), &u, d)?;
                logs.push((1.0, l));
            }
            Ok(finish_f(&logs, 0, n_samples))
        }
        FMethod::Plain => {
            let seg = Segmentation::new(intervals, &[]);
            let lens: Vec<f64> = intervals.iter().map(Interval::len).collect();
            let mut logs = Vec::with_capacity(n_samples);
            let mut rejected = 0u64;
            'outer: for _ in 0..n_samples {
                let x = seg.brownian(d, rng);
                let sums = seg.interval_sums(&x, d);
                let (mut sign, mut l) = (1.0, 0.0);
                for (xi, &ell) in sums.iter().zip(&lens) {
                    let v = pot.eval_v(ell, xi);
                    if !v.is_finite() {
                        rejected += 1;
                        continue 'outer;
                    }
                    if v == 0.0 {
                        sign = 0.0;
                    }
                    sign *= v.signum();
                    l += v.abs().ln();
                }
                logs.push((sign, l));
            }
            if logs.is_empty() {
                return Err(Error::Numerical("every plain sample was rejected".into()));
            }
            Ok(finish_f(&logs, rejected, n_samples))
        }
    }
}

fn finish_f(logs: &[(f64, f64)], rejected: u64, n_requested: usize) -> FEstimate {
    let (value, se, log_value, max_share) = log_space_mean(logs);
    let divergent = logs.len() >= 100 && max_share > 0.5;
    let mut estimate = Estimate::new(value, se, n_requested as u64);
    if divergent {
        estimate = estimate.flag("unstable-running-mean");
    }
    FEstimate { estimate, log_value, rejected, divergent }
}

/// Cluster intervals with one Bernstein mark each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkedCluster {
    pub intervals: Vec<Interval>,
    pub marks: Vec<f64>,
}

/// Gaussian law of segment increments given marks: precision
/// `diag(1/ℓ_k) + Σ u_i² a_i a_iᵀ` per coordinate. Draws and window
/// variances use the Woodbury identity, so the work is `O(K·N + N³)`.
pub struct MarkConditionedGaussian<'a> {
    seg: &'a Segmentation,
    cov: &'a DMatrix<f64>,
    u: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    d: usize,
}

impl<'a> MarkConditionedGaussian<'a> {
    pub fn new(seg: &'a Segmentation, cov: &'a DMatrix<f64>, u: &[f64], d: usize) -> Result<Self> {
        let n = u.len();
        let s = DMatrix::from_fn(n, n, |i, j| (i == j) as u8 as f64 + u[i] * cov[(i, j)] * u[j]);
        let chol = Cholesky::new(s).ok_or_else(|| Error::Numerical("mark-conditioned system not positive definite".into()))?;
        Ok(Self { seg, cov, u: u.to_vec(), chol, d })
    }

    /// `M⁻¹ v` with `M = U⁻¹ + C`, written as `U^{1/2} S⁻¹ U^{1/2} v`.
    fn m_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = DVector::from_fn(v.len(), |i, _| self.u[i] * v[i]);
        let z = self.chol.solve(&w);
        DVector::from_fn(v.len(), |i, _| self.u[i] * z[i])
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let mut x = self.seg.brownian(self.d, rng);
        if self.u.iter().all(|&u| u == 0.0) {
            return x;
        }
        let n = self.u.len();
        let ys = self.seg.interval_sums(&x, self.d);
        for c in 0..self.d {
            let eta = DVector::from_fn(n, |i, _| self.u[i] * rng.sample::<f64, _>(StandardNormal));
            let rhs = DVector::from_fn(n, |i, _| ys[i][c]) + self.cov * &eta;
            let corr = eta - self.m_inv(&rhs);
            for (i, &(lo, hi)) in self.seg.ranges.iter().enumerate() {
                for k in lo..hi {
                    x[k][c] += self.seg.lengths[k] * corr[i];
                }
            }
        }
        x
    }

    /// Per-coordinate variance of the sum of segment increments over `window`.
    pub fn window_variance(&self, window: Interval) -> f64 {
        let seg_w: f64 = self
            .seg
            .points
            .windows(2)
            .map(|p| Interval::new(p[0], p[1]).overlap(&window))
            .sum();
        if self.u.iter().all(|&u| u == 0.0) {
            return seg_w;
        }
        let r = DVector::from_fn(self.u.len(), |i, _| {
            let (lo, hi) = self.seg.ranges[i];
            Interval::new(self.seg.points[lo], self.seg.points[hi]).overlap(&window)
        });
        seg_w - r.dot(&self.m_inv(&r))
    }
}

/// Metropolis chain on marks targeting `∏ μ_i(du_i) · det(I + C U)^{−d/2}`
/// with independent proposals from the single-interval posteriors.
pub struct MarkChain {
    props: Vec<MarkProposal>,
    cov: DMatrix<f64>,
    u: Vec<f64>,
    log_ratio: f64,
    d: usize,
    pub accepted: u64,
    pub proposed: u64,
}

impl MarkChain {
    pub fn new<R: Rng + ?Sized>(intervals: &[Interval], pot: &Potential, rng: &mut R) -> Result<Self> {
        let props = proposals(intervals, pot)?;
        let cov = IncrementCovariance::new(intervals)?.matrix.clone();
        let u: Vec<f64> = props.iter().map(|p| p.sample(rng)).collect();
        let d = pot.dimension();
        let log_ratio = Self::log_ratio_of(&props, &cov, &u, d)?;
        Ok(Self { props, cov, u, log_ratio, d, accepted: 0, proposed: 0 })
    }

    fn log_ratio_of(props: &[MarkProposal], cov: &DMatrix<f64>, u: &[f64], d: usize) -> Result<f64> {
        let single: f64 = props.iter().zip(u).map(|(p, &x)| p.log_single(x)).sum();
        Ok(log_gaussian_quadratic_expectation(cov, u, d)? - single)
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.u.len() == 1 {
            // the single-interval posterior is the proposal itself
            self.u[0] = self.props[0].sample(rng);
            self.accepted += 1;
            self.proposed += 1;
            return Ok(());
        }
        for i in 0..self.u.len() {
            let old = self.u[i];
            self.u[i] = self.props[i].sample(rng);
            let lr = Self::log_ratio_of(&self.props, &self.cov, &self.u, self.d)?;
            self.proposed += 1;
            if rng.random::<f64>().ln() < lr - self.log_ratio {
                self.log_ratio = lr;
                self.accepted += 1;
            } else {
                self.u[i] = old;
            }
        }
        Ok(())
    }

    pub fn marks(&self) -> &[f64] {
        &self.u
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn acceptance(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathMethod {
    ExactMixture,
    Mh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub mark_burn_in: usize,
    pub mark_thin: usize,
    pub mh_burn_in: usize,
    pub mh_thin: usize,
    pub min_ess: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { mark_burn_in: 50, mark_thin: 5, mh_burn_in: 500, mh_thin: 10, min_ess: 50.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathLaw {
    Wiener,
    ClusterConditioned,
    StationaryComposite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub increments: Vec<Vec<f64>>,
    pub law: PathLaw,
}

impl PathSample {
    pub fn dimension(&self) -> usize {
        self.increments.first().map(Vec::len).unwrap_or(0)
    }

    /// Path values at the grid times, starting from 0.
    pub fn cumulative(&self) -> Vec<Vec<f64>> {
        let d = self.dimension();
        let mut out = vec![vec![0.0; d]];
        for inc in &self.increments {
            let last = out.last().unwrap();
            out.push(last.iter().zip(inc).map(|(a, b)| a + b).collect());
        }
        out
    }

    /// Sum of increments between grid times `times[i]` and `times[j]`.
    pub fn increment_between(&self, i: usize, j: usize) -> Vec<f64> {
        let d = self.dimension();
        let mut s = vec![0.0; d];
        for inc in &self.increments[i..j] {
            for c in 0..d {
                s[c] += inc[c];
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    pub acceptance: f64,
    pub ess: f64,
}

fn check_grid(intervals: &[Interval], grid: &[f64]) -> Result<()> {
    check(grid.windows(2).all(|w| w[0] < w[1]), || "grid must be strictly increasing".into())?;
    for iv in intervals {
        for t in [iv.start, iv.end] {
            check(grid.binary_search_by(|p| p.total_cmp(&t)).is_ok(), || format!("grid misses endpoint {t}"))?;
        }
    }
    Ok(())
}

/// Draws from `P_ξ` on `grid` (cluster-relative times containing every endpoint).
pub fn sample_paths_given_cluster<R: Rng + ?Sized>(
    intervals: &[Interval],
    pot: &Potential,
    grid: &[f64],
    n_samples: usize,
    rng: &mut R,
    method: PathMethod,
    opts: &SamplerOptions,
) -> Result<(Vec<PathSample>, SamplerReport)> {
    check_grid(intervals, grid)?;
    check(n_samples >= 1, || "n_samples must be ≥ 1".into())?;
    let seg = Segmentation::new(intervals, grid);
    let d = pot.dimension();
    let span = Interval::new(grid[0], *grid.last().unwrap());
    let mut out = Vec::with_capacity(n_samples);
    let mut trace = Vec::with_capacity(n_samples);
    let acceptance;
    match method {
        PathMethod::ExactMixture => {
            if !pot.completely_monotone() {
                return Err(Error::Unsupported("exact_mixture needs a completely monotone potential".into()));
            }
            let mut chain = MarkChain::new(intervals, pot, rng)?;
            for _ in 0..opts.mark_burn_in {
                chain.sweep(rng)?;
            }
            for _ in 0..n_samples {
                for _ in 0..opts.mark_thin.max(1) {
                    chain.sweep(rng)?;
                }
                let g = MarkConditionedGaussian::new(&seg, chain.covariance(), chain.marks(), d)?;
                trace.push(g.window_variance(span));
                out.push(PathSample { times: seg.points.clone(), increments: g.draw(rng), law: PathLaw::ClusterConditioned });
            }
            acceptance = chain.acceptance();
        }
        PathMethod::Mh => {
            let (samples, acc) = mh_paths(intervals, pot, &seg, n_samples, rng, opts)?;
            for x in samples {
                let tot: Vec<f64> = (0..d).map(|c| x.iter().map(|xk| xk[c]).sum()).collect();
                trace.push(tot.iter().map(|v| v * v).sum());
                out.push(PathSample { times: seg.points.clone(), increments: x, law: PathLaw::ClusterConditioned });
            }
            acceptance = acc;
        }
    }
    let ess = chain_ess(&trace);
    if method == PathMethod::Mh && n_samples >= 10 && ess < opts.min_ess {
        return Err(Error::LowEss { ess, floor: opts.min_ess });
    }
    Ok((out, SamplerReport { acceptance, ess }))
}

pub fn sample_path_given_cluster<R: Rng + ?Sized>(
    intervals: &[Interval],
    pot: &Potential,
    grid: &[f64],
    rng: &mut R,
    method: PathMethod,
) -> Result<PathSample> {
    let (mut v, _) = sample_paths_given_cluster(intervals, pot, grid, 1, rng, method, &SamplerOptions::default())?;
    Ok(v.pop().unwrap())
}

/// Random-walk Metropolis on segment increments, single-segment updates,
/// step size tuned towards 40% acceptance during burn-in.
fn mh_paths<R: Rng + ?Sized>(
    intervals: &[Interval],
    pot: &Potential,
    seg: &Segmentation,
    n_samples: usize,
    rng: &mut R,
    opts: &SamplerOptions,
) -> Result<(Vec<Vec<Vec<f64>>>, f64)> {
    let d = pot.dimension();
    let lens: Vec<f64> = intervals.iter().map(Interval::len).collect();
    let covering: Vec<Vec<usize>> = (0..seg.len())
        .map(|k| seg.ranges.iter().enumerate().filter(|(_, r)| r.0 <= k && k < r.1).map(|(i, _)| i).collect())
        .collect();
    let log_v = |i: usize, xi: &[f64]| -> f64 {
        let v = pot.eval_v(lens[i], xi);
        if v > 0.0 && v.is_finite() {
            v.ln()
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut x = seg.brownian(d, rng);
    let mut sums = seg.interval_sums(&x, d);
    let mut lv: Vec<f64> = sums.iter().enumerate().map(|(i, s)| log_v(i, s)).collect();
    let mut tries = 0;
    while lv.iter().any(|l| !l.is_finite()) {
        tries += 1;
        if tries > 1000 {
            return Err(Error::Numerical("no starting state with finite v".into()));
        }
        x = seg.brownian(d, rng);
        sums = seg.interval_sums(&x, d);
        lv = sums.iter().enumerate().map(|(i, s)| log_v(i, s)).collect();
    }
    let mut step = 1.0;
    let (mut acc, mut prop) = (0u64, 0u64);
    let (mut batch_acc, mut batch_prop) = (0u64, 0u64);
    let mut out = Vec::with_capacity(n_samples);
    let total_sweeps = opts.mh_burn_in + n_samples * opts.mh_thin.max(1);
    for sweep in 0..total_sweeps {
        let (mut sa, mut sp) = (0u64, 0u64);
        for k in 0..seg.len() {
            let sl = step * seg.lengths[k].sqrt();
            let dx: Vec<f64> = (0..d).map(|_| sl * rng.sample::<f64, _>(StandardNormal)).collect();
            let new_xk: Vec<f64> = x[k].iter().zip(&dx).map(|(a, b)| a + b).collect();
            let prior = |v: &[f64]| -v.iter().map(|a| a * a).sum::<f64>() / (2.0 * seg.lengths[k]);
            let mut delta = prior(&new_xk) - prior(&x[k]);
            let mut new_lv = Vec::with_capacity(covering[k].len());
            for &i in &covering[k] {
                let s: Vec<f64> = sums[i].iter().zip(&dx).map(|(a, b)| a + b).collect();
                let l = log_v(i, &s);
                delta += l - lv[i];
                new_lv.push((i, s, l));
            }
            sp += 1;
            if delta.is_finite() && rng.random::<f64>().ln() < delta {
                x[k] = new_xk;
                for (i, s, l) in new_lv {
                    sums[i] = s;
                    lv[i] = l;
                }
                sa += 1;
            }
        }
        if sweep < opts.mh_burn_in {
            batch_acc += sa;
            batch_prop += sp;
            if batch_prop >= 50 {
                step *= (2.0 * (batch_acc as f64 / batch_prop as f64 - 0.4)).exp();
                batch_acc = 0;
                batch_prop = 0;
            }
        } else {
            acc += sa;
            prop += sp;
            if (sweep - opts.mh_burn_in + 1).is_multiple_of(opts.mh_thin.max(1)) {
                out.push(x.clone());
            }
        }
    }
    Ok((out, acc as f64 / prop.max(1) as f64))
}

/// d×d matrix estimate with per-entry standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub n: u64,
}

impl MatrixEstimate {
    pub fn trace(&self) -> f64 {
        (0..self.mean.len()).map(|i| self.mean[i][i]).sum()
    }
}

/// Weighted draws `(log w_j, Y_j)` → self-normalized mean and delta-method SE.
fn self_normalized(logw: &[f64], ys: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let sw: f64 = w.iter().sum();
    let k = ys[0].len();
    let mean: Vec<f64> = (0..k).map(|c| w.iter().zip(ys).map(|(wj, y)| wj * y[c]).sum::<f64>() / sw).collect();
    let se = (0..k)
        .map(|c| (w.iter().zip(ys).map(|(wj, y)| (wj * (y[c] - mean[c])).powi(2)).sum::<f64>()).sqrt() / sw)
        .collect();
    (mean, se)
}

/// `E_ξ[X_{0,a} X_{0,a}ᵀ]` by importance sampling: marks from the
/// single-interval posteriors (completely monotone potentials) or Brownian
/// paths weighted by `∏ v` (positive `v` otherwise).
pub fn second_moment_under_p_xi<R: Rng + ?Sized>(intervals: &[Interval], pot: &Potential, n_samples: usize, rng: &mut R) -> Result<MatrixEstimate> {
    check(n_samples >= 2, || "need at least two samples".into())?;
    let d = pot.dimension();
    let span = Interval::new(
        intervals.iter().map(|iv| iv.start).fold(f64::INFINITY, f64::min),
        intervals.iter().map(|iv| iv.end).fold(f64::NEG_INFINITY, f64::max),
    );
    let mut logw = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    let outer = |x: &[f64]| -> Vec<f64> { (0..d * d).map(|k| x[k / d] * x[k % d]).collect() };
    if pot.completely_monotone() {
        let props = proposals(intervals, pot)?;
        let seg = Segmentation::new(intervals, &[]);
        let cov = IncrementCovariance::new(intervals)?.matrix.clone();
        let mut u = vec![0.0; intervals.len()];
        for _ in 0..n_samples {
            let mut l = 0.0;
            for (ui, p) in u.iter_mut().zip(&props) {
                *ui = p.sample(rng);
                l -= p.log_single(*ui);
            }
            l += log_gaussian_quadratic_expectation(&cov, &u, d)?;
            let g = MarkConditionedGaussian::new(&seg, &cov, &u, d)?;
            let s = g.window_variance(span).max(0.0).sqrt();
            let x: Vec<f64> = (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect();
            logw.push(l);
            ys.push(outer(&x));
        }
    } else {
        let seg = Segmentation::new(intervals, &[]);
        for _ in 0..n_samples {
            let x = seg.brownian(d, rng);
            let sums = seg.interval_sums(&x, d);
            let mut l = 0.0;
            for (iv, xi) in intervals.iter().zip(&sums) {
                let v = pot.eval_v(iv.len(), xi);
                if v < 0.0 {
                    return Err(Error::Unsupported("P_ξ needs nonnegative v".into()));
                }
                l += v.ln();
            }
            if !l.is_finite() {
                continue;
            }
            let tot: Vec<f64> = (0..d).map(|c| x.iter().map(|xk| xk[c]).sum()).collect();
            logw.push(l);
            ys.push(outer(&tot));
        }
    }
    let (mean, se) = self_normalized(&logw, &ys);
    let to_mat = |v: &[f64]| (0..d).map(|i| v[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
    let mut mean = to_mat(&mean);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (mean[i][j] + mean[j][i]);
            mean[i][j] = s;
            mean[j][i] = s;
        }
    }
    Ok(MatrixEstimate { mean, se: to_mat(&se), n: logw.len() as u64 })
}

/// Rao–Blackwellized `E_ξ[|X_{0,a}|²]/d`: given marks the span increment is
/// `N(0, s²(u) I)`, so only `s²(u)` is averaged. Needs complete monotonicity.
pub fn span_variance_rb<R: Rng + ?Sized>(intervals: &[Interval], pot: &Potential, n_samples: usize, rng: &mut R) -> Result<Estimate> {
    let d = pot.dimension();
    let props = proposals(intervals, pot)?;
    let a = intervals.iter().map(|iv| iv.end).fold(f64::NEG_INFINITY, f64::max);
    let start = intervals.iter().map(|iv| iv.start).fold(f64::INFINITY, f64::min);
    if props.iter().all(|p| p.is_deterministic() && p.atoms[0].0 == 0.0) {
        return Ok(Estimate::exact(a - start));
    }
    let seg = Segmentation::new(intervals, &[]);
    let cov = IncrementCovariance::new(intervals)?.matrix.clone();
    let span = Interval::new(start, a);
    let n = if intervals.len() == 1 && props[0].is_deterministic() { 1 } else { n_samples.max(2) };
    let mut logw = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut u = vec![0.0; intervals.len()];
    for _ in 0..n {
        let mut l = 0.0;
        for (ui, p) in u.iter_mut().zip(&props) {
            *ui = p.sample(rng);
            l -= p.log_single(*ui);
        }
        l += log_gaussian_quadratic_expectation(&cov, &u, d)?;
        logw.push(l);
        ys.push(vec![MarkConditionedGaussian::new(&seg, &cov, &u, d)?.window_variance(span)]);
    }
    let (m, se) = self_normalized(&logw, &ys);
    Ok(Estimate::new(m[0], se[0], n as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{sample_busy_cycle, Cluster};
    use crate::estimate::RunningStats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn iv(a: f64, b: f64) -> Interval {
        Interval::new(a, b)
    }

    #[test]
    fn determinant_formula_examples() {
        let one = gaussian_quadratic_expectation(&[iv(0.0, 1.0)], &[1.0], 3).unwrap();
        assert!((one - 2f64.powf(-1.5)).abs() < 1e-15);
        let ivs = [iv(0.0, 1.0), iv(0.5, 2.0), iv(1.5, 3.0)];
        assert_eq!(gaussian_quadratic_expectation(&ivs, &[0.0; 3], 3).unwrap(), 1.0);
        let a = gaussian_quadratic_expectation(&[iv(0.0, 1.0)], &[0.7], 2).unwrap();
        let b = gaussian_quadratic_expectation(&[iv(2.0, 2.5)], &[1.3], 2).unwrap();
        let ab = gaussian_quadratic_expectation(&[iv(0.0, 1.0), iv(2.0, 2.5)], &[0.7, 1.3], 2).unwrap();
        assert!((ab - a * b).abs() < 1e-15);
    }

    #[test]
    fn sqrt_factor_handles_singular_covariance() {
        // 1_{[0,2]} = 1_{[0,1]} + 1_{[1,2]} makes C singular
        let cov = IncrementCovariance::new(&[iv(0.0, 2.0), iv(0.0, 1.0), iv(1.0, 2.0)]).unwrap();
        let b = cov.sqrt_factor();
        assert!((&b * b.transpose() - cov.matrix()).abs().max() < 1e-12);
        let cov = IncrementCovariance::new(&[iv(0.0, 1.0), iv(0.3, 2.0)]).unwrap();
        let b = cov.sqrt_factor();
        assert!((&b * b.transpose() - cov.matrix()).abs().max() < 1e-14);
    }

    #[test]
    fn determinant_matches_plain_monte_carlo_on_random_clusters() {
        // independent route: joint draws through the covariance square root
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let c = loop {
                let c = sample_busy_cycle(&mut rng, 1.5, 1.0).unwrap().cluster;
                if c.len() <= 5 {
                    break c;
                }
            };
            let u: Vec<f64> = (0..c.len()).map(|_| rng.random::<f64>() * 1.5).collect();
            let exact = gaussian_quadratic_expectation(c.intervals(), &u, 3).unwrap();
            let b = IncrementCovariance::new(c.intervals()).unwrap().sqrt_factor();
            let n = c.len();
            let mut s = RunningStats::default();
            for _ in 0..20_000 {
                let mut q = 0.0;
                for _ in 0..3 {
                    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let x = &b * z;
                    q += (0..n).map(|i| u[i] * u[i] * x[i] * x[i]).sum::<f64>();
                }
                s.push((-0.5 * q).exp());
            }
            assert!(s.estimate().within(exact, 3.5), "{:?} vs {exact}", s.estimate());
        }
    }

    /// `E[1/|X|]` for `X ~ N(0, t I₃)` by radial quadrature.
    fn inverse_radius_oracle(t: f64) -> f64 {
        let dens = |r: f64| 4.0 * PI * r * r * (-r * r / (2.0 * t)).exp() / (2.0 * PI * t).powf(1.5);
        quadrature::double_exponential::integrate(|r| dens(r) / r, 0.0, 40.0 * t.sqrt(), 1e-12).integral
    }

    #[test]
    fn frohlich_single_interval_f() {
        let pot = Potential::frohlich();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &t in &[0.5, 1.0, 2.0, 2.0 / PI] {
            let oracle = inverse_radius_oracle(t);
            assert!((oracle - (2.0 / (PI * t)).sqrt()).abs() < 1e-9);
            let mix = estimate_f(&[iv(0.0, t)], &pot, 1000, &mut rng, FMethod::Mixture).unwrap();
            assert!((mix.estimate.value - oracle).abs() < 1e-12);
            let plain = estimate_f(&[iv(0.0, t)], &pot, 200_000, &mut rng, FMethod::Plain).unwrap();
            assert!(plain.estimate.within(oracle, 3.0), "t={t}: {:?} vs {oracle}", plain.estimate);
            assert_eq!(plain.rejected, 0);
        }
    }

    #[test]
    fn trivial_f_is_exactly_one() {
        let pot = Potential::trivial(1.0).unwrap();
        let ivs = [iv(0.0, 1.0), iv(0.4, 2.0), iv(1.9, 2.2)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in [FMethod::Plain, FMethod::Mixture] {
            let f = estimate_f(&ivs, &pot, 100, &mut rng, m).unwrap();
            assert_eq!(f.estimate.value, 1.0);
            assert_eq!(f.estimate.se, 0.0);
        }
        let two = Potential::trivial(1.0).unwrap().shift_by_g(1.0).unwrap();
        let f = estimate_f(&ivs, &two, 10, &mut rng, FMethod::Mixture).unwrap();
        assert!((f.estimate.value - 8.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_clusters_multiply() {
        let pot = Potential::frohlich();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = [iv(0.0, 1.0), iv(0.5, 1.2)];
        let b = [iv(3.0, 3.6), iv(3.2, 4.5), iv(4.0, 4.4)];
        let ab: Vec<Interval> = a.iter().chain(&b).copied().collect();
        let fa = estimate_f(&a, &pot, 100_000, &mut rng, FMethod::Mixture).unwrap().estimate;
        let fb = estimate_f(&b, &pot, 100_000, &mut rng, FMethod::Mixture).unwrap().estimate;
        let fab = estimate_f(&ab, &pot, 100_000, &mut rng, FMethod::Mixture).unwrap().estimate;
        let prod = Estimate::new(fa.value * fb.value, ((fa.se * fb.value).powi(2) + (fb.se * fa.value).powi(2)).sqrt(), 1);
        assert!(fab.z_distance(&prod) < 3.0, "{fab:?} vs {prod:?}");
    }

    #[test]
    fn mixture_and_plain_agree_on_multi_interval_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ivs = [iv(0.0, 0.8), iv(0.3, 1.5), iv(1.1, 1.7)];
        for pot in [Potential::frohlich(), Potential::bounded_exponential(0.7, 1.0, 0.6).unwrap()] {
            let m = estimate_f(&ivs, &pot, 100_000, &mut rng, FMethod::Mixture).unwrap().estimate;
            let p = estimate_f(&ivs, &pot, 100_000, &mut rng, FMethod::Plain).unwrap().estimate;
            assert!(m.z_distance(&p) < 3.0, "{m:?} vs {p:?}");
        }
    }

    #[test]
    fn mixture_needs_complete_monotonicity() {
        let pot = Potential::nelson(1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(matches!(estimate_f(&[iv(0.0, 1.0)], &pot, 10, &mut rng, FMethod::Mixture), Err(Error::Unsupported(_))));
        assert!(estimate_f(&[iv(0.0, 1.0)], &pot, 10, &mut rng, FMethod::Plain).is_ok());
    }

    #[test]
    fn conditional_variance_single_interval() {
        let ivs = [iv(0.0, 2.0)];
        let seg = Segmentation::new(&ivs, &[]);
        let cov = IncrementCovariance::new(&ivs).unwrap().matrix.clone();
        let g = MarkConditionedGaussian::new(&seg, &cov, &[1.5], 3).unwrap();
        // tilted precision 1/t + u²
        assert!((g.window_variance(iv(0.0, 2.0)) - 2.0 / (1.0 + 2.25 * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn woodbury_draws_match_precision_inverse() {
        let ivs = [iv(0.0, 1.0), iv(0.4, 1.6), iv(1.2, 2.0)];
        let seg = Segmentation::new(&ivs, &[0.2, 0.7, 1.8]);
        let cov = IncrementCovariance::new(&ivs).unwrap().matrix.clone();
        let u = [0.8, 1.7, 0.0];
        let g = MarkConditionedGaussian::new(&seg, &cov, &u, 1).unwrap();
        let k = seg.len();
        let mut p = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 / seg.lengths[i] } else { 0.0 });
        for (i, &(lo, hi)) in seg.ranges.iter().enumerate() {
            for a in lo..hi {
                for b in lo..hi {
                    p[(a, b)] += u[i] * u[i];
                }
            }
        }
        let sigma = p.try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut acc = DMatrix::zeros(k, k);
        for _ in 0..n {
            let x = g.draw(&mut rng);
            let v = DVector::from_fn(k, |i, _| x[i][0]);
            acc += &v * v.transpose();
        }
        acc /= n as f64;
        for i in 0..k {
            for j in 0..k {
                let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((acc[(i, j)] - sigma[(i, j)]).abs() < 4.0 * se, "({i},{j}) {} vs {}", acc[(i, j)], sigma[(i, j)]);
            }
        }
        let w = iv(0.2, 1.8);
        let ones = DVector::from_fn(k, |i, _| (seg.points[i] >= 0.2 && seg.points[i + 1] <= 1.8) as u8 as f64);
        assert!((g.window_variance(w) - (ones.transpose() * &sigma * &ones)[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn path_sampler_trivial_is_brownian() {
        let pot = Potential::trivial(1.0).unwrap();
        let c = Cluster::new(vec![iv(0.0, 1.0), iv(0.5, 2.0)]).unwrap();
        let grid: Vec<f64> = (0..=8).map(|i| i as f64 * 0.25).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (paths, _) = sample_paths_given_cluster(c.intervals(), &pot, &grid, 4000, &mut rng, PathMethod::ExactMixture, &SamplerOptions::default()).unwrap();
        let mut s = RunningStats::default();
        for p in &paths {
            for inc in &p.increments {
                s.push(inc[0] * inc[0]);
            }
        }
        assert!(s.estimate().within(0.25, 3.0), "{:?}", s.estimate());
    }

    #[test]
    fn frohlich_single_interval_second_moment() {
        // under P_ξ the density is ∝ e^{−|x|²/2t}/|x|, so E|X|² = E|X|/E[1/|X|] = 2t
        let t = 1.0;
        let dens = |r: f64| r * r * (-r * r / (2.0 * t)).exp();
        let num = quadrature::double_exponential::integrate(|r| dens(r) * r, 0.0, 40.0, 1e-12).integral;
        let den = quadrature::double_exponential::integrate(|r| dens(r) / r, 0.0, 40.0, 1e-12).integral;
        let oracle = num / den;
        assert!((oracle - 2.0).abs() < 1e-9);
        let pot = Potential::frohlich();
        let ivs = [iv(0.0, t)];
        let grid = [0.0, 0.5, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let opts = SamplerOptions::default();
        let sq = |p: &PathSample| p.increment_between(0, 2).iter().map(|x| x * x).sum::<f64>();
        let (ex, _) = sample_paths_given_cluster(&ivs, &pot, &grid, 20_000, &mut rng, PathMethod::ExactMixture, &opts).unwrap();
        let e1 = Estimate::from_samples(&ex.iter().map(sq).collect::<Vec<_>>());
        assert!(e1.within(oracle, 3.0), "{e1:?}");
        assert!(e1.value < 3.0);
        let (mh, rep) = sample_paths_given_cluster(&ivs, &pot, &grid, 4000, &mut rng, PathMethod::Mh, &opts).unwrap();
        let xs: Vec<f64> = mh.iter().map(sq).collect();
        let mut e2 = Estimate::from_samples(&xs);
        e2.se *= (xs.len() as f64 / rep.ess).sqrt();
        assert!(rep.acceptance > 0.2 && rep.acceptance < 0.7, "{rep:?}");
        assert!(e1.z_distance(&e2) < 3.0, "{e1:?} vs {e2:?}");
        let m = second_moment_under_p_xi(&ivs, &pot, 50_000, &mut rng).unwrap();
        let tr = Estimate::new(m.trace(), (0..3).map(|i| m.se[i][i].powi(2)).sum::<f64>().sqrt(), m.n);
        assert!(tr.within(2.0, 3.0), "{tr:?}");
        let rb = span_variance_rb(&ivs, &pot, 20_000, &mut rng).unwrap();
        assert!(Estimate::new(3.0 * rb.value, 3.0 * rb.se, rb.n).within(2.0, 3.0), "{rb:?}");
    }

    #[test]
    fn second_moment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let triv = Potential::trivial(1.0).unwrap();
        let ivs = [iv(0.0, 1.2), iv(0.7, 2.0)];
        let m = second_moment_under_p_xi(&ivs, &triv, 40_000, &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 } else { 0.0 };
                assert!((m.mean[i][j] - want).abs() < 3.0 * m.se[i][j], "({i},{j}) {m:?}");
            }
        }
        let f = Potential::frohlich();
        let m = second_moment_under_p_xi(&ivs, &f, 40_000, &mut rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(m.mean[i][j].abs() < 3.0 * m.se[i][j].max(1e-12));
                }
            }
        }
        assert!(m.trace() < 3.0 * 2.0);
        assert_eq!(span_variance_rb(&ivs, &triv, 10, &mut rng).unwrap(), Estimate::exact(2.0));
    }

    #[test]
    fn grid_must_refine_endpoints() {
        let pot = Potential::frohlich();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_path_given_cluster(&[iv(0.0, 1.0)], &pot, &[0.0, 0.7], &mut rng, PathMethod::ExactMixture);
        assert!(r.is_err());
    }
}
