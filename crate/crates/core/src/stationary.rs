//! The infinite-volume path measure on windows, the CLT covariance `Σ`, the
//! functional-CLT test battery and the free-energy identities.
//!
//! A window of `ℙ_{α,∞}` is drawn in two stages: a stationary tilted
//! alternating configuration, then Brownian increments on dormant stretches
//! and an independent `P_ξ` path on every cluster.

use crate::cluster::Interval;
use crate::error::{check, Error, Result};
use crate::estimate::{ratio_estimate, Estimate, RunningStats};
use crate::exec::Executor;
use crate::gaussian::{
    estimate_f, sample_path_given_cluster, second_moment_under_p_xi, span_variance_rb, MarkChain, MarkConditionedGaussian, PathLaw, PathMethod, PathSample,
    SamplerOptions, Segmentation,
};
use crate::potentials::Potential;
use crate::renewal::{sample_queue_path, AlternatingConfiguration, StationaryMethod, StationaryWindowSampler};
use crate::rng::{domain, SeedStreams};
use crate::stats::{chi_square_2x2, ks_statistic, ks_test, mann_whitney_greater, normal_cdf, TestResult};
use crate::tilting::{default_f_method, limit_constant, solve_lambda, CyclePool, PoolOptions, SolveOptions, TiltOptions, TiltedLaw};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowOptions {
    /// Burn-in before the window in units of `Ê[T̂₁]`.
    pub burn_in_factor: f64,
    pub pilot: usize,
    /// Defaults to the exact mark mixture when the potential allows it.
    pub method: Option<PathMethod>,
    pub sampler: SamplerOptions,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self { burn_in_factor: 100.0, pilot: 1000, method: None, sampler: SamplerOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub path: PathSample,
    pub configuration: AlternatingConfiguration,
    /// Per-coordinate variance of `X_{A,B}` given configuration and marks.
    pub conditional_variance: Option<f64>,
}

/// Reusable sampler of `ℙ_{α,∞}` restricted to windows.
pub struct InfiniteVolumeSampler<'a> {
    pot: &'a Potential,
    stationary: StationaryWindowSampler<'a, TiltedLaw>,
    method: PathMethod,
    opts: SamplerOptions,
}

impl<'a> InfiniteVolumeSampler<'a> {
    pub fn new<R: Rng + ?Sized>(tilted: &'a TiltedLaw, pot: &'a Potential, opts: WindowOptions, rng: &mut R) -> Result<Self> {
        let method = opts.method.unwrap_or(if pot.completely_monotone() { PathMethod::ExactMixture } else { PathMethod::Mh });
        let stationary = StationaryWindowSampler::new(tilted, rng, opts.pilot, StationaryMethod::BurnIn { factor: opts.burn_in_factor })?;
        Ok(Self { pot, stationary, method, opts: opts.sampler })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, a: f64, b: f64, grid_step: f64) -> Result<WindowSample> {
        let k = (b - a) / grid_step;
        check(grid_step > 0.0 && (k - k.round()).abs() < 1e-9 * k.max(1.0) && k.round() >= 1.0, || {
            format!("grid step {grid_step} must divide [{a}, {b}]")
        })?;
        let k = k.round() as usize;
        let grid: Vec<f64> = (0..=k).map(|i| if i == k { b } else { a + i as f64 * grid_step }).collect();
        let config = self.stationary.sample(rng, a, b)?;
        let d = self.pot.dimension();
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
        values.push(vec![0.0; d]);
        let mut cur_t = a;
        let mut cur_x = vec![0.0; d];
        let mut gi = 1;
        // dormant measure inside the window plus conditional cluster variances
        let mut cond_var = Some(b - a);
        let brownian_to = |rng: &mut R, x: &mut Vec<f64>, from: f64, to: f64| {
            let s = (to - from).max(0.0).sqrt();
            for c in x.iter_mut() {
                *c += s * rng.sample::<f64, _>(StandardNormal);
            }
        };
        for pc in config.clusters() {
            let span = pc.span();
            let (s, e) = (span.start.max(a), span.end.min(b));
            if s >= e {
                continue;
            }
            while gi < grid.len() && grid[gi] <= s {
                brownian_to(rng, &mut cur_x, cur_t, grid[gi]);
                cur_t = grid[gi];
                values.push(cur_x.clone());
                gi += 1;
            }
            brownian_to(rng, &mut cur_x, cur_t, s);
            let intervals: Vec<Interval> = pc.absolute_intervals().collect();
            let extra: Vec<f64> = grid.iter().copied().filter(|&g| g > span.start && g < span.end).chain([s, e]).collect();
            let (times, incs, wv) = self.cluster_path(&intervals, &extra, Interval::new(s, e), rng)?;
            cond_var = match (cond_var, wv) {
                (Some(v), Some(w)) => Some(v - (e - s) + w),
                _ => None,
            };
            let mut cum = vec![vec![0.0; d]];
            for inc in &incs {
                let last = cum.last().unwrap();
                cum.push(last.iter().zip(inc).map(|(p, q)| p + q).collect());
            }
            let at = |t: f64| -> &Vec<f64> {
                let i = times.binary_search_by(|p| p.total_cmp(&t)).expect("time on cluster grid");
                &cum[i]
            };
            let base = at(s).clone();
            let start_x = cur_x.clone();
            let shift = |y: &Vec<f64>| -> Vec<f64> { start_x.iter().zip(y).zip(&base).map(|((x0, y), b0)| x0 + y - b0).collect() };
            while gi < grid.len() && grid[gi] <= e {
                values.push(shift(at(grid[gi])));
                gi += 1;
            }
            cur_x = shift(at(e));
            cur_t = e;
        }
        while gi < grid.len() {
            brownian_to(rng, &mut cur_x, cur_t, grid[gi]);
            cur_t = grid[gi];
            values.push(cur_x.clone());
            gi += 1;
        }
        let increments = values.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(p, q)| p - q).collect()).collect();
        Ok(WindowSample {
            path: PathSample { times: grid, increments, law: PathLaw::StationaryComposite },
            configuration: config,
            conditional_variance: cond_var,
        })
    }

    /// One `P_ξ` path on the cluster grid, plus the conditional variance over
    /// `window` when marks are available.
    fn cluster_path<R: Rng + ?Sized>(&self, intervals: &[Interval], extra: &[f64], window: Interval, rng: &mut R) -> Result<(Vec<f64>, Vec<Vec<f64>>, Option<f64>)> {
        let d = self.pot.dimension();
        match self.method {
            PathMethod::ExactMixture => {
                let mut chain = MarkChain::new(intervals, self.pot, rng)?;
                if intervals.len() > 1 {
                    for _ in 0..self.opts.mark_burn_in {
                        chain.sweep(rng)?;
                    }
                }
                let seg = Segmentation::new(intervals, extra);
                let g = MarkConditionedGaussian::new(&seg, chain.covariance(), chain.marks(), d)?;
                let incs = g.draw(rng);
                let wv = g.window_variance(window);
                Ok((seg.points.clone(), incs, Some(wv)))
            }
            PathMethod::Mh => {
                let mut grid: Vec<f64> = intervals.iter().flat_map(|iv| [iv.start, iv.end]).chain(extra.iter().copied()).collect();
                grid.sort_by(|p, q| p.total_cmp(q));
                grid.dedup();
                let p = sample_path_given_cluster(intervals, self.pot, &grid, rng, PathMethod::Mh)?;
                Ok((p.times, p.increments, None))
            }
        }
    }
}

/// One window of `ℙ_{α,∞}`; builds a fresh sampler (pilot run included).
pub fn sample_infinite_volume_window<R: Rng + ?Sized>(tilted: &TiltedLaw, pot: &Potential, a: f64, b: f64, grid_step: f64, rng: &mut R) -> Result<WindowSample> {
    InfiniteVolumeSampler::new(tilted, pot, WindowOptions::default(), rng)?.sample(rng, a, b, grid_step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaMethod {
    /// Conditional span variance given marks; `Σ ∝ I` by rotation symmetry.
    RaoBlackwell,
    /// Weighted draws of the full matrix `E_ξ[X Xᵀ]`.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub matrix: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    /// `Ê[Σ(d̂₁, ξ̂₁)]` (diagonal mean) and `Ê[T̂₁]`.
    pub numerator: Estimate,
    pub mean_total: Estimate,
    pub eigenvalues: Vec<f64>,
    pub psd: bool,
    pub below_identity: bool,
    pub method: SigmaMethod,
    pub n_cycles: usize,
}

impl SigmaReport {
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_se(&self) -> f64 {
        self.se.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        let d = self.matrix.len();
        DMatrix::from_fn(d, d, |i, j| self.matrix[i][j])
    }
}

/// `Σ = Ê[d̂₁ I + E_ξ̂[X_{0,â}X_{0,â}ᵀ]] / Ê[T̂₁]` over `n_cycles` tilted cycles,
/// with the dormant period integrated out (`Ê[d̂₁] = 1/(α+λ)`).
pub fn estimate_sigma<E: Executor>(
    tilted: &TiltedLaw,
    pot: &Potential,
    n_cycles: usize,
    n_inner: usize,
    method: SigmaMethod,
    streams: &SeedStreams,
    exec: &E,
) -> Result<SigmaReport> {
    check(n_cycles >= 2 && n_inner >= 2, || "need n_cycles ≥ 2 and n_inner ≥ 2".into())?;
    if method == SigmaMethod::RaoBlackwell && !pot.completely_monotone() {
        return Err(Error::Unsupported("Rao–Blackwell Σ needs a completely monotone potential".into()));
    }
    let d = pot.dimension();
    let ed = 1.0 / tilted.dormant_rate();
    let rows = exec
        .map(n_cycles, |j| {
            let mut rng = streams.stream(domain::SIGMA, j as u64);
            let entry = &tilted.pool().entries()[tilted.sample_index(&mut rng)];
            let iv = entry.cycle.cluster.intervals();
            let m: Vec<Vec<f64>> = match method {
                SigmaMethod::RaoBlackwell => {
                    let s2 = span_variance_rb(iv, pot, n_inner, &mut rng)?.value;
                    (0..d).map(|i| (0..d).map(|k| if i == k { s2 } else { 0.0 }).collect()).collect()
                }
                SigmaMethod::Sampled => second_moment_under_p_xi(iv, pot, n_inner, &mut rng)?.mean,
            };
            Ok((m, entry.active()))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = rows.iter().map(|r| ed + r.1).collect();
    let mut matrix = vec![vec![0.0; d]; d];
    let mut se = vec![vec![0.0; d]; d];
    for i in 0..d {
        for k in 0..d {
            let y: Vec<f64> = rows.iter().map(|r| r.0[i][k] + if i == k { ed } else { 0.0 }).collect();
            let e = ratio_estimate(&y, &x);
            matrix[i][k] = e.value;
            se[i][k] = e.se;
        }
    }
    for i in 0..d {
        for k in 0..i {
            let s = 0.5 * (matrix[i][k] + matrix[k][i]);
            matrix[i][k] = s;
            matrix[k][i] = s;
        }
    }
    let diag: Vec<f64> = rows.iter().map(|r| ed + (0..d).map(|i| r.0[i][i]).sum::<f64>() / d as f64).collect();
    let numerator = Estimate::from_samples(&diag);
    let mean_total = Estimate::from_samples(&x);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, k| matrix[i][k]));
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|p, q| p.total_cmp(q));
    let max_se = se.iter().flatten().cloned().fold(0.0, f64::max);
    let slack = 3.0 * max_se + 1e-12;
    Ok(SigmaReport {
        psd: eigenvalues[0] >= -slack,
        below_identity: *eigenvalues.last().unwrap() <= 1.0 + slack,
        matrix,
        se,
        numerator,
        mean_total,
        eigenvalues,
        method,
        n_cycles,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcltOptions {
    pub n_paths: usize,
    pub grid_points: usize,
    pub level: f64,
    pub deltas: [f64; 3],
    pub window: WindowOptions,
}

impl Default for FcltOptions {
    fn default() -> Self {
        Self { n_paths: 2000, grid_points: 400, level: 0.01, deltas: [0.1, 0.05, 0.01], window: WindowOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusTest {
    pub delta: f64,
    pub test: TestResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcltScaleReport {
    pub n: f64,
    /// Whitened KS per coordinate against `N(0,1)`.
    pub marginal_ks: Vec<TestResult>,
    pub marginal_p_bonferroni: f64,
    pub marginal_pass: bool,
    pub whitening: String,
    /// Sign quadrants of the two half increments, coordinate 0.
    pub independence: TestResult,
    pub independence_pass: bool,
    /// One-sided rank test, alternative "modulus larger than Wiener".
    pub modulus: Vec<ModulusTest>,
    pub modulus_pass: bool,
    /// `sup_x |F_n(x) − Φ(x/σ̂)|` for coordinate 0, Rao–Blackwellized when
    /// conditional variances are available.
    pub ks_distance: f64,
    pub ks_distance_rao_blackwell: bool,
    /// Per-coordinate variance of `X^n_1`.
    pub variance: Estimate,
}

impl FcltScaleReport {
    pub fn all_pass(&self) -> bool {
        self.marginal_pass && self.independence_pass && self.modulus_pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcltReport {
    pub scales: Vec<FcltScaleReport>,
    pub level: f64,
    pub ks_distance_nonincreasing: bool,
    /// `(empirical variance at the largest n − σ̂²)/combined SE`.
    pub sigma_consistency_z: f64,
}

/// Largest `|X_t − X_s|` over grid pairs with `|t − s| ≤ δ`.
pub fn modulus_of_continuity(path: &PathSample, delta: f64) -> f64 {
    let x = path.cumulative();
    let t = &path.times;
    let mut best = 0.0f64;
    for i in 0..x.len() {
        let mut j = i + 1;
        while j < x.len() && t[j] - t[i] <= delta + 1e-12 {
            let r: f64 = x[j].iter().zip(&x[i]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            best = best.max(r);
            j += 1;
        }
    }
    best
}

/// Symmetric inverse square root; `None` when an eigenvalue is within
/// `floor` of zero.
fn inverse_sqrt(m: &DMatrix<f64>, floor: f64) -> Option<DMatrix<f64>> {
    let e = SymmetricEigen::new(m.clone());
    if e.eigenvalues.iter().any(|&v| v <= floor) {
        return None;
    }
    let dvals = DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Some(&e.eigenvectors * dvals * e.eigenvectors.transpose())
}

/// Standard Wiener paths on `[0,1]` with `grid_points` steps.
pub fn wiener_paths<R: Rng + ?Sized>(n_paths: usize, grid_points: usize, d: usize, rng: &mut R) -> Vec<PathSample> {
    let h = 1.0 / grid_points as f64;
    (0..n_paths)
        .map(|_| PathSample {
            times: (0..=grid_points).map(|i| i as f64 * h).collect(),
            increments: (0..grid_points).map(|_| (0..d).map(|_| h.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()).collect(),
            law: PathLaw::Wiener,
        })
        .collect()
}

/// Negative control: `blocks` block sums form a stationary AR(1) with
/// coefficient `rho`, each block filled in by a Brownian bridge.
pub fn ar1_block_paths<R: Rng + ?Sized>(rho: f64, blocks: usize, n_paths: usize, grid_points: usize, d: usize, rng: &mut R) -> Vec<PathSample> {
    let per = grid_points / blocks;
    let h = 1.0 / (per * blocks) as f64;
    let bv = 1.0 / blocks as f64;
    (0..n_paths)
        .map(|_| {
            let mut incs: Vec<Vec<f64>> = vec![vec![0.0; d]; per * blocks];
            for c in 0..d {
                let mut e: f64 = rng.sample(StandardNormal);
                for b in 0..blocks {
                    if b > 0 {
                        e = rho * e + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
                    }
                    let w: Vec<f64> = (0..per).map(|_| h.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
                    let shift = (w.iter().sum::<f64>() - e * bv.sqrt()) / per as f64;
                    for (k, wk) in w.iter().enumerate() {
                        incs[b * per + k][c] = wk - shift;
                    }
                }
            }
            PathSample { times: (0..=per * blocks).map(|i| i as f64 * h).collect(), increments: incs, law: PathLaw::Wiener }
        })
        .collect()
}

/// The four FCLT statistics for rescaled paths on `[0,1]`.
/// `cond_var[j]` is the variance of one coordinate of `X^n_1` given the
/// configuration of path `j`.
pub fn fclt_scale_statistics(
    n: f64,
    paths: &[PathSample],
    cond_var: Option<&[f64]>,
    sigma: &SigmaReport,
    wiener: &[PathSample],
    opts: &FcltOptions,
) -> FcltScaleReport {
    let d = sigma.matrix.len();
    let s = sigma.as_matrix();
    let ends: Vec<Vec<f64>> = paths.iter().map(|p| p.increment_between(0, p.increments.len())).collect();
    let floor = 3.0 * sigma.max_se();
    let (marginal_ks, whitening) = match inverse_sqrt(&s, floor) {
        Some(w) => {
            let z: Vec<Vec<f64>> = ends
                .iter()
                .map(|x| {
                    let v = &w * nalgebra::DVector::from_column_slice(x);
                    v.iter().copied().collect()
                })
                .collect();
            ((0..d).map(|c| ks_test(&z.iter().map(|v| v[c]).collect::<Vec<_>>(), normal_cdf)).collect::<Vec<_>>(), "symmetric inverse square root".to_string())
        }
        None => (
            (0..d)
                .map(|c| {
                    let sd = s[(c, c)].max(1e-300).sqrt();
                    ks_test(&ends.iter().map(|v| v[c] / sd).collect::<Vec<_>>(), normal_cdf)
                })
                .collect(),
            "per-coordinate marginals (Σ̂ near singular)".to_string(),
        ),
    };
    let min_p = marginal_ks.iter().map(|t| t.p_value).fold(1.0, f64::min);
    let marginal_p_bonferroni = (min_p * d as f64).min(1.0);
    let half = paths.first().map(|p| p.increments.len() / 2).unwrap_or(0);
    let mut table = [[0.0; 2]; 2];
    for p in paths {
        let a = p.increment_between(0, half)[0] > 0.0;
        let b = p.increment_between(half, p.increments.len())[0] > 0.0;
        table[a as usize][b as usize] += 1.0;
    }
    let independence = chi_square_2x2(table);
    let modulus: Vec<ModulusTest> = opts
        .deltas
        .iter()
        .map(|&delta| {
            let x: Vec<f64> = paths.iter().map(|p| modulus_of_continuity(p, delta)).collect();
            let y: Vec<f64> = wiener.iter().map(|p| modulus_of_continuity(p, delta)).collect();
            ModulusTest { delta, test: mann_whitney_greater(&x, &y) }
        })
        .collect();
    let modulus_pass = modulus.iter().all(|m| m.test.p_value >= opts.level / modulus.len() as f64);
    let sd0 = s[(0, 0)].max(1e-300).sqrt();
    let (ks_distance, rb) = match cond_var {
        Some(v) => {
            let m = v.len() as f64;
            let sup = (0..=400)
                .map(|i| {
                    let x = sd0 * (-5.0 + 10.0 * i as f64 / 400.0);
                    let mix: f64 = v.iter().map(|&vj| if vj > 0.0 { normal_cdf(x / (vj / n).sqrt()) } else { (x >= 0.0) as u8 as f64 }).sum::<f64>() / m;
                    (mix - normal_cdf(x / sd0)).abs()
                })
                .fold(0.0, f64::max);
            (sup, true)
        }
        None => (ks_statistic(&ends.iter().map(|v| v[0]).collect::<Vec<_>>(), |x| normal_cdf(x / sd0)), false),
    };
    let variance = match cond_var {
        Some(v) => Estimate::from_samples(&v.iter().map(|vj| vj / n).collect::<Vec<_>>()),
        None => {
            let sq: Vec<f64> = ends.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>() / d as f64).collect();
            Estimate::from_samples(&sq)
        }
    };
    FcltScaleReport {
        n,
        marginal_pass: marginal_p_bonferroni >= opts.level,
        marginal_ks,
        marginal_p_bonferroni,
        whitening,
        independence_pass: independence.p_value >= opts.level,
        independence,
        modulus,
        modulus_pass,
        ks_distance,
        ks_distance_rao_blackwell: rb,
        variance,
    }
}

/// Rescaled stationary paths `X^n_t = n^{−1/2} X_{nt}` for each `n`, tested
/// against `N(0, Σ̂)` and the Wiener measure.
pub fn fclt_test<E: Executor>(
    tilted: &TiltedLaw,
    pot: &Potential,
    n_list: &[f64],
    sigma: &SigmaReport,
    opts: &FcltOptions,
    streams: &SeedStreams,
    exec: &E,
) -> Result<FcltReport> {
    check(!n_list.is_empty() && n_list.iter().all(|&n| n > 0.0), || "scales must be positive".into())?;
    check(opts.n_paths >= 20 && opts.grid_points >= 2, || "need n_paths ≥ 20 and grid_points ≥ 2".into())?;
    let d = pot.dimension();
    let mut wrng = streams.stream(domain::WIENER, 0);
    let wiener = wiener_paths(opts.n_paths, opts.grid_points, d, &mut wrng);
    let mut scales = Vec::new();
    for (k, &n) in n_list.iter().enumerate() {
        let mut srng = streams.stream(domain::WINDOW, k as u64);
        let sampler = InfiniteVolumeSampler::new(tilted, pot, opts.window, &mut srng)?;
        let step = n / opts.grid_points as f64;
        let draws = exec
            .map(opts.n_paths, |j| {
                let mut rng = streams.stream(domain::PATHS, ((k as u64) << 32) | j as u64);
                let w = sampler.sample(&mut rng, 0.0, n, step)?;
                let scale = n.sqrt().recip();
                let path = PathSample {
                    times: w.path.times.iter().map(|t| t / n).collect(),
                    increments: w.path.increments.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect(),
                    law: PathLaw::StationaryComposite,
                };
                Ok((path, w.conditional_variance))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let cv: Option<Vec<f64>> = draws.iter().map(|d| d.1).collect();
        let paths: Vec<PathSample> = draws.into_iter().map(|d| d.0).collect();
        scales.push(fclt_scale_statistics(n, &paths, cv.as_deref(), sigma, &wiener, opts));
    }
    let ks_distance_nonincreasing = scales.windows(2).all(|w| w[1].ks_distance <= w[0].ks_distance);
    let last = scales.last().unwrap();
    let sigma_diag = (0..d).map(|i| sigma.matrix[i][i]).sum::<f64>() / d as f64;
    let sigma_consistency_z = (last.variance.value - sigma_diag) / (last.variance.se.powi(2) + sigma.max_se().powi(2)).sqrt().max(1e-300);
    Ok(FcltReport { scales, level: opts.level, ks_distance_nonincreasing, sigma_consistency_z })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityOptions {
    pub pool: PoolOptions,
    pub solve: SolveOptions,
    /// Central finite-difference step for `ψ′`.
    pub fd_step: f64,
    /// Pool entries used by the deletion estimator.
    pub deletion_entries: usize,
    /// Length of the tilted path used for the dormancy fraction.
    pub dormancy_horizon: f64,
}

impl Default for IdentityOptions {
    fn default() -> Self {
        Self {
            pool: PoolOptions::default(),
            solve: SolveOptions { bootstrap: 100, ..Default::default() },
            fd_step: 0.05,
            deletion_entries: 5000,
            dormancy_horizon: 20_000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaIdentities {
    pub alpha: f64,
    pub psi: Estimate,
    /// Central difference of the solved `ψ`, joint bootstrap SE.
    pub psi_prime_fd: Estimate,
    /// `E[N e^{−λT}F] / E[N e^{−λT}F̄]` with `F̄` the leave-one-out average.
    pub psi_prime_deletion: Estimate,
    /// `(Ê[N̂]/Ê[T̂₁]) / (E[N]/E[T₁])`.
    pub psi_prime_density: Estimate,
    /// `αψ′(α)Ê[T̂₁]` and `Ê[N̂]`.
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub relative_gap: f64,
    pub z: f64,
    /// `Ê[T̂₁]` from the tilted pool and as `1/(ψ·lim Z e^{−ψT})` from fresh cycles.
    pub mean_total_tilted: Estimate,
    pub mean_total_from_limit: Estimate,
    /// `Ê[d̂₁]/Ê[T̂₁]` and the dormant fraction of a simulated tilted path.
    pub dormancy_ratio: Estimate,
    pub dormancy_simulated: Estimate,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitiesReport {
    /// These relations rest on formal exchanges of limits; they are checks
    /// with tolerances, not theorems.
    pub label: String,
    pub alphas: Vec<AlphaIdentities>,
    pub psi_prime_nondecreasing: bool,
}

fn solved_pool<E: Executor>(alpha: f64, pot: &Potential, opts: &IdentityOptions, streams: &SeedStreams, exec: &E) -> Result<(CyclePool, f64)> {
    let pool = CyclePool::build(alpha, pot, opts.pool, streams, exec)?;
    let sol = solve_lambda(&pool, SolveOptions { bootstrap: 0, ..opts.solve }, streams)?;
    Ok((pool, sol.lambda_star))
}

/// The free-energy identities on a grid of `α`. Pools at `α` and `α ± h`
/// share their random streams, so the finite difference sees little noise.
pub fn psi_identities_check<E: Executor>(alpha_list: &[f64], pot: &Potential, opts: &IdentityOptions, streams: &SeedStreams, exec: &E) -> Result<IdentitiesReport> {
    check(!alpha_list.is_empty(), || "empty alpha list".into())?;
    let h = opts.fd_step;
    check(alpha_list.iter().all(|&a| a > h), || format!("every alpha must exceed the step {h}"))?;
    let mut out = Vec::new();
    for (ai, &alpha) in alpha_list.iter().enumerate() {
        let mut flags = Vec::new();
        let (p_lo, l_lo) = solved_pool(alpha - h, pot, opts, streams, exec)?;
        let (p_hi, l_hi) = solved_pool(alpha + h, pot, opts, streams, exec)?;
        let tilt = TiltOptions { pool: opts.pool, solve: opts.solve, ..Default::default() };
        let law = TiltedLaw::solve(alpha, pot, tilt, streams, exec)?;
        let lam = law.lambda_star();
        let sol = law.solution().cloned().expect("solved law");
        let fd = (l_hi + alpha + h - (l_lo + alpha - h)) / (2.0 * h);
        let n = law.pool().len();
        let mut boots = RunningStats::default();
        for b in 0..opts.solve.bootstrap {
            let mut rng = streams.child(ai as u64).stream(domain::BOOTSTRAP, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let root = |p: &CyclePool, start: f64| {
                let lo = -p.alpha() + opts.solve.lower_offset;
                crate::tilting::resolve(p, &idx, start, lo, start.abs() * 4.0 + p.alpha() + 10.0, 1e-10)
            };
            boots.push((root(&p_hi, l_hi) + h - root(&p_lo, l_lo) + h) / (2.0 * h));
        }
        let psi_prime_fd = Estimate::new(fd, if opts.solve.bootstrap >= 2 { boots.variance().sqrt() } else { f64::NAN }, n as u64);
        if psi_prime_fd.se > 0.2 * fd.abs() {
            flags.push("finite-difference noise dominates".into());
        }
        // deletion estimator on the first entries of the pool
        let m = opts.deletion_entries.min(n);
        let pairs = exec
            .map(m, |j| {
                let e = &law.pool().entries()[j];
                let mut rng = streams.stream(domain::IDENTITIES, j as u64);
                let k = e.customers();
                let mut fbar = 0.0;
                for drop in 0..k {
                    let rest = e.cycle.cluster.without(drop);
                    fbar += if rest.is_empty() {
                        1.0
                    } else {
                        estimate_f(&rest, pot, opts.pool.n_inner, &mut rng, default_f_method(pot))?.estimate.value
                    };
                }
                fbar /= k as f64;
                let tilt_factor = (-lam * e.active()).exp() * k as f64;
                Ok((tilt_factor * e.f, tilt_factor * fbar))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let psi_prime_deletion = ratio_estimate(&pairs.iter().map(|p| p.0).collect::<Vec<_>>(), &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let tt = law.mean_total();
        let nn = law.mean_customers();
        let psi_prime_density = {
            let v = nn.value / (alpha * tt.value);
            Estimate::new(v, v * ((nn.se / nn.value).powi(2) + (tt.se / tt.value).powi(2)).sqrt(), nn.n)
        };
        let lhs_v = alpha * fd * tt.value;
        let lhs = Estimate::new(lhs_v, lhs_v.abs() * ((psi_prime_fd.se / fd).powi(2) + (tt.se / tt.value).powi(2)).sqrt(), tt.n);
        let relative_gap = (lhs.value - nn.value).abs() / nn.value.abs();
        let z = lhs.z_distance(&nn);
        let lc = limit_constant(&law, pot, opts.pool, &streams.child(1000 + ai as u64), exec)?;
        let mt = 1.0 / (law.psi() * lc.real_z_form.value);
        let mean_total_from_limit = Estimate::new(mt, mt * lc.real_z_form.se / lc.real_z_form.value, lc.real_z_form.n);
        let dr = (1.0 / law.dormant_rate()) / tt.value;
        let dormancy_ratio = Estimate::new(dr, dr * tt.se / tt.value, tt.n);
        let mut rng = streams.child(2000 + ai as u64).stream(domain::IDENTITIES, 0);
        let path = sample_queue_path(&mut rng, &law, 0.0, opts.dormancy_horizon)?;
        let batches = 50;
        let bl = opts.dormancy_horizon / batches as f64;
        let fr: Vec<f64> = (0..batches).map(|i| path.dormant_time(i as f64 * bl, (i + 1) as f64 * bl) / bl).collect();
        let dormancy_simulated = Estimate::from_samples(&fr);
        let _ = sol;
        out.push(AlphaIdentities {
            alpha,
            psi: Estimate::new(law.psi(), law.solution().map(|s| s.se).unwrap_or(f64::NAN), n as u64),
            psi_prime_fd,
            psi_prime_deletion,
            psi_prime_density,
            lhs,
            rhs: nn,
            relative_gap,
            z,
            mean_total_tilted: tt,
            mean_total_from_limit,
            dormancy_ratio,
            dormancy_simulated,
            flags,
        });
    }
    let psi_prime_nondecreasing = out.windows(2).all(|w| w[1].psi_prime_fd.value >= w[0].psi_prime_fd.value);
    Ok(IdentitiesReport { label: "heuristic".into(), alphas: out, psi_prime_nondecreasing })
}
