//! Renewal numerics and the alternating dormant/active process.
//!
//! The queue alternates dormant stretches and clusters. Laid end to end the
//! cycles form a renewal process; [`StationaryWindowSampler`] produces its
//! stationary version on a window.

use crate::cluster::{expected_cycle_length, sample_busy_cycle_with, Cycle, ExpService, Interval, PlacedCluster, ServiceSampler};
use crate::error::{check, Error, Result};
use crate::estimate::RunningStats;
use crate::stats::{ks_test, normal_cdf, TestResult};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Uniform grid data for `Z = z + Z * μ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenewalGrid {
    pub step: f64,
    pub mu: Vec<f64>,
    pub z: Vec<f64>,
}

impl RenewalGrid {
    pub fn from_fns(step: f64, horizon: f64, mu: impl Fn(f64) -> f64, z: impl Fn(f64) -> f64) -> Self {
        let n = (horizon / step).round() as usize + 1;
        Self {
            step,
            mu: (0..n).map(|i| mu(i as f64 * step)).collect(),
            z: (0..n).map(|i| z(i as f64 * step)).collect(),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.z.len()).map(|i| i as f64 * self.step).collect()
    }
}

/// Trapezoidal Volterra solve:
/// `Z_n (1 − hμ₀/2) = z_n + h(Σ_{k=1}^{n−1} μ_k Z_{n−k} + ½ μ_n Z₀)`.
pub fn solve_renewal_equation(grid: &RenewalGrid) -> Result<Vec<f64>> {
    let h = grid.step;
    check(h > 0.0 && h.is_finite(), || format!("step {h} must be positive"))?;
    check(grid.mu.len() == grid.z.len() && !grid.z.is_empty(), || "mu and z must share a non-empty grid".into())?;
    check(grid.mu.iter().all(|&m| m >= 0.0 && m.is_finite()), || "mu density must be finite and ≥ 0".into())?;
    let n = grid.z.len();
    let mu = &grid.mu;
    let denom = 1.0 - 0.5 * h * mu[0];
    check(denom > 0.0, || "step too coarse for mu(0)".into())?;
    let mut out = vec![0.0; n];
    out[0] = grid.z[0];
    for i in 1..n {
        let conv: f64 = (1..i).map(|k| mu[k] * out[i - k]).sum();
        out[i] = (grid.z[i] + h * (conv + 0.5 * mu[i] * out[0])) / denom;
    }
    Ok(out)
}

/// A source of iid cycles.
pub trait CycleSource {
    fn sample_cycle<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Cycle>;
    /// Exact mean cycle length when known.
    fn mean_cycle_length(&self) -> Option<f64>;
}

/// Raw queue cycles: Poisson(α) arrivals, given service law.
#[derive(Clone, Copy, Debug)]
pub struct QueueCycles<S: ServiceSampler> {
    pub alpha: f64,
    pub service: S,
}

impl QueueCycles<ExpService> {
    pub fn exponential(alpha: f64, beta: f64) -> Self {
        Self { alpha, service: ExpService { rate: beta } }
    }
}

impl<S: ServiceSampler> CycleSource for QueueCycles<S> {
    fn sample_cycle<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Cycle> {
        sample_busy_cycle_with(rng, self.alpha, &self.service)
    }

    fn mean_cycle_length(&self) -> Option<f64> {
        // P(empty) = e^{−αE[τ]} = E[d]/E[T₁] holds for any service law
        Some(expected_cycle_length(self.alpha, 1.0 / self.service.mean()))
    }
}

/// Cycle placed at absolute time: dormant on `[start, start + d]`, cluster after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedCycle {
    pub start: f64,
    pub cycle: Cycle,
}

impl PlacedCycle {
    pub fn end(&self) -> f64 {
        self.start + self.cycle.total()
    }

    pub fn cluster_offset(&self) -> f64 {
        self.start + self.cycle.dormant
    }

    pub fn placed_cluster(&self) -> PlacedCluster {
        PlacedCluster { offset: self.cluster_offset(), cluster: self.cycle.cluster.clone() }
    }
}

/// Dormant/active partition of a window, cycles in time order covering it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlternatingConfiguration {
    pub window: (f64, f64),
    pub cycles: Vec<PlacedCycle>,
}

impl AlternatingConfiguration {
    pub fn is_dormant_at(&self, t: f64) -> bool {
        self.cycles
            .iter()
            .find(|c| c.start <= t && t < c.end())
            .map(|c| t < c.cluster_offset())
            .unwrap_or(true)
    }

    /// Clusters whose span meets the window.
    pub fn clusters(&self) -> Vec<PlacedCluster> {
        let (a, b) = self.window;
        self.cycles
            .iter()
            .map(PlacedCycle::placed_cluster)
            .filter(|c| {
                let s = c.span();
                s.start <= b && s.end >= a
            })
            .collect()
    }

    /// Dormant time inside `[a, b]`.
    pub fn dormant_time(&self, a: f64, b: f64) -> f64 {
        let w = Interval::new(a, b);
        self.cycles.iter().map(|c| Interval::new(c.start, c.cluster_offset()).overlap(&w)).sum()
    }

    /// Index of the first cycle starting after `t` (the next renewal).
    pub fn next_renewal_after(&self, t: f64) -> Option<f64> {
        self.cycles.iter().map(PlacedCycle::end).find(|&e| e > t)
    }
}

/// Cycles laid end to end from `start` (dormant at `start`) until `end` is covered.
pub fn sample_queue_path<R: Rng + ?Sized, C: CycleSource>(rng: &mut R, source: &C, start: f64, end: f64) -> Result<AlternatingConfiguration> {
    let mut cycles = Vec::new();
    let mut t = start;
    while t <= end {
        let cycle = source.sample_cycle(rng)?;
        let total = cycle.total();
        cycles.push(PlacedCycle { start: t, cycle });
        t += total;
    }
    Ok(AlternatingConfiguration { window: (start, end), cycles })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DormancyCurve {
    pub t: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub renewal: Vec<f64>,
    pub simulated: Vec<f64>,
    pub simulated_se: Vec<f64>,
}

/// `P(dormant at t)` from an empty start, three ways: the M/M/∞ closed form
/// `exp(−(α/β)(1 − e^{−βt}))`, the renewal equation with `z(t) = e^{−αt}` and
/// a cycle-length density estimated from `n` simulated clusters, and direct
/// simulation of `n` queue paths.
pub fn dormancy_probability_curve<R: Rng + ?Sized>(alpha: f64, beta: f64, t_grid: &[f64], n: usize, rng: &mut R) -> Result<DormancyCurve> {
    check(alpha > 0.0 && beta > 0.0, || "alpha, beta must be positive".into())?;
    check(t_grid.len() >= 2 && t_grid[0] == 0.0, || "t_grid must start at 0 with ≥ 2 points".into())?;
    let h = t_grid[1];
    check(
        h > 0.0 && t_grid.iter().enumerate().all(|(i, &t)| (t - i as f64 * h).abs() <= 1e-9 * (1.0 + t)),
        || "t_grid must be uniform".into(),
    )?;
    check(n >= 1, || "n must be ≥ 1".into())?;
    let source = QueueCycles::exponential(alpha, beta);
    let horizon = *t_grid.last().unwrap();
    let closed_form = t_grid.iter().map(|&t| (-(alpha / beta) * (-(beta * t)).exp_m1().abs()).exp()).collect();
    // T₁ = d + a with d ~ Exp(α) independent, so f_T(t) = E[α e^{−α(t−a)} 1{a<t}]
    let mut actives: Vec<f64> = (0..n).map(|_| source.sample_cycle(rng).map(|c| c.cluster.active_length())).collect::<Result<_>>()?;
    actives.sort_by(|a, b| a.total_cmp(b));
    let mu: Vec<f64> = t_grid
        .iter()
        .map(|&t| actives.iter().take_while(|&&a| a < t).map(|&a| alpha * (-alpha * (t - a)).exp()).sum::<f64>() / n as f64)
        .collect();
    let grid = RenewalGrid { step: h, mu, z: t_grid.iter().map(|&t| (-alpha * t).exp()).collect() };
    let renewal = solve_renewal_equation(&grid)?;
    let mut stats = vec![RunningStats::default(); t_grid.len()];
    for _ in 0..n {
        let path = sample_queue_path(rng, &source, 0.0, horizon)?;
        let mut ci = 0;
        for (i, &t) in t_grid.iter().enumerate() {
            while path.cycles[ci].end() <= t {
                ci += 1;
            }
            stats[i].push((t < path.cycles[ci].cluster_offset()) as u8 as f64);
        }
    }
    Ok(DormancyCurve {
        t: t_grid.to_vec(),
        closed_form,
        renewal,
        simulated: stats.iter().map(RunningStats::mean).collect(),
        simulated_se: stats.iter().map(RunningStats::se).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StationaryMethod {
    /// Start dormant at `A − factor·E[T₁]` and discard the burn-in.
    BurnIn { factor: f64 },
    /// Length-biased straddler resampled from a pool of cycles.
    SizeBiased { pool: usize },
}

impl Default for StationaryMethod {
    fn default() -> Self {
        StationaryMethod::BurnIn { factor: 100.0 }
    }
}

pub const HEAVY_TAIL_CV: f64 = 50.0;

pub struct StationaryWindowSampler<'a, C: CycleSource> {
    source: &'a C,
    mean: f64,
    cv: f64,
    method: StationaryMethod,
    pool: Vec<Cycle>,
    cumulative: Vec<f64>,
}

impl<'a, C: CycleSource> StationaryWindowSampler<'a, C> {
    /// A pilot run of `pilot` cycles estimates the cycle-length CV; a CV above
    /// 50 means the length-bias normalizer is unreliable and sampling refuses.
    pub fn new<R: Rng + ?Sized>(source: &'a C, rng: &mut R, pilot: usize, method: StationaryMethod) -> Result<Self> {
        check(pilot >= 2, || "pilot must be ≥ 2".into())?;
        let n_draw = match method {
            StationaryMethod::SizeBiased { pool } => pool.max(pilot),
            StationaryMethod::BurnIn { factor } => {
                check(factor > 0.0, || "burn-in factor must be positive".into())?;
                pilot
            }
        };
        let cycles: Vec<Cycle> = (0..n_draw).map(|_| source.sample_cycle(rng)).collect::<Result<_>>()?;
        let mut s = RunningStats::default();
        cycles.iter().for_each(|c| s.push(c.total()));
        let cv = s.variance().sqrt() / s.mean();
        if cv > HEAVY_TAIL_CV {
            return Err(Error::HeavyTail(cv));
        }
        let mean = source.mean_cycle_length().unwrap_or(s.mean());
        let (pool, cumulative) = match method {
            StationaryMethod::SizeBiased { .. } => {
                let mut acc = 0.0;
                let cum = cycles.iter().map(|c| {
                    acc += c.total();
                    acc
                });
                let cum: Vec<f64> = cum.collect();
                (cycles, cum)
            }
            StationaryMethod::BurnIn { .. } => (Vec::new(), Vec::new()),
        };
        Ok(Self { source, mean, cv, method, pool, cumulative })
    }

    pub fn mean_cycle_length(&self) -> f64 {
        self.mean
    }

    pub fn pilot_cv(&self) -> f64 {
        self.cv
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, a: f64, b: f64) -> Result<AlternatingConfiguration> {
        check(a < b, || format!("window [{a}, {b}] is empty"))?;
        let mut cycles = Vec::new();
        let mut t = match self.method {
            StationaryMethod::BurnIn { factor } => {
                let mut t = a - factor * self.mean;
                loop {
                    let c = self.source.sample_cycle(rng)?;
                    let end = t + c.total();
                    if end > a {
                        cycles.push(PlacedCycle { start: t, cycle: c });
                        break end;
                    }
                    t = end;
                }
            }
            StationaryMethod::SizeBiased { .. } => {
                let total = *self.cumulative.last().unwrap();
                let x = rng.random::<f64>() * total;
                let j = self.cumulative.partition_point(|&c| c <= x).min(self.pool.len() - 1);
                let c = self.pool[j].clone();
                let start = a - rng.random::<f64>() * c.total();
                let end = start + c.total();
                cycles.push(PlacedCycle { start, cycle: c });
                end
            }
        };
        while t <= b {
            let c = self.source.sample_cycle(rng)?;
            let total = c.total();
            cycles.push(PlacedCycle { start: t, cycle: c });
            t += total;
        }
        Ok(AlternatingConfiguration { window: (a, b), cycles })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSumReport {
    pub ks: TestResult,
    pub mean: f64,
    pub variance: f64,
    pub expected_variance: f64,
    pub reps: usize,
}

/// Law of `t^{−1/2} Σ_{k ≤ N_t} X_k` against `N(0, θΣ)`, `θ = 1/E[T₁]`,
/// `Σ = E[X²]`.
#[allow(clippy::too_many_arguments)]
pub fn random_sum_clt_check<R: Rng + ?Sized>(
    rng: &mut R,
    mut increment: impl FnMut(&mut R) -> f64,
    mut interarrival: impl FnMut(&mut R) -> f64,
    mean_interarrival: f64,
    increment_second_moment: f64,
    t: f64,
    reps: usize,
) -> RandomSumReport {
    let theta = 1.0 / mean_interarrival;
    let var = theta * increment_second_moment;
    let mut xs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut clock = interarrival(rng);
        let mut s = 0.0;
        while clock <= t {
            s += increment(rng);
            clock += interarrival(rng);
        }
        xs.push(s / t.sqrt());
    }
    let mut st = RunningStats::default();
    xs.iter().for_each(|&x| st.push(x));
    let sd = var.sqrt();
    RandomSumReport {
        ks: ks_test(&xs, |x| normal_cdf(x / sd)),
        mean: st.mean(),
        variance: st.variance(),
        expected_variance: var,
        reps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::sample_poisson_configuration;
    use crate::estimate::Estimate;
    use crate::stats::ks_two_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, StandardNormal};

    fn poisson_error(h: f64) -> f64 {
        let alpha = 1.3;
        let g = RenewalGrid::from_fns(h, 10.0, |t| alpha * (-alpha * t).exp(), |_| 1.0);
        let z = solve_renewal_equation(&g).unwrap();
        g.times().iter().zip(&z).map(|(t, v)| (v - (1.0 + alpha * t)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn poisson_renewal_function() {
        let e = poisson_error(1e-3);
        assert!(e <= 1e-4, "{e}");
        let ratio = poisson_error(2e-2) / poisson_error(1e-2);
        assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn defective_measure_limit() {
        // μ = ½e^{−t}, z ≡ c: Z(t) = c(2 − e^{−t/2})
        let c = 0.7;
        let g = RenewalGrid::from_fns(1e-3, 40.0, |t| 0.5 * (-t).exp(), |_| c);
        let z = solve_renewal_equation(&g).unwrap();
        assert!((z.last().unwrap() - 2.0 * c).abs() < 1e-4);
        for (t, v) in g.times().iter().zip(&z).step_by(997) {
            assert!((v - c * (2.0 - (-t / 2.0).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_inhomogeneity_and_bad_input() {
        let g = RenewalGrid::from_fns(0.01, 5.0, |t| (-t).exp(), |_| 0.0);
        assert!(solve_renewal_equation(&g).unwrap().iter().all(|&v| v == 0.0));
        let g = RenewalGrid::from_fns(0.01, 5.0, |_| -1.0, |_| 1.0);
        assert!(solve_renewal_equation(&g).is_err());
    }

    #[test]
    fn dormancy_curve_three_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t: Vec<f64> = (0..=300).map(|i| i as f64 * 0.05).collect();
        let c = dormancy_probability_curve(1.0, 1.0, &t, 20_000, &mut rng).unwrap();
        assert_eq!(c.closed_form[0], 1.0);
        assert_eq!(c.simulated[0], 1.0);
        assert!((c.closed_form[20] - (-(1.0 - (-1.0f64).exp())).exp()).abs() < 1e-12);
        assert!((c.closed_form[20] - 0.5315).abs() < 1e-4);
        assert!((c.closed_form[300] - (-1.0f64).exp()).abs() < 1e-3);
        for i in (0..t.len()).step_by(10) {
            assert!((c.renewal[i] - c.closed_form[i]).abs() < 0.01, "renewal at t={}: {} vs {}", t[i], c.renewal[i], c.closed_form[i]);
            let se = c.simulated_se[i].max(1e-3);
            assert!((c.simulated[i] - c.closed_form[i]).abs() < 4.0 * se, "sim at t={}", t[i]);
        }
    }

    #[test]
    fn renewal_rate_and_dormant_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let src = QueueCycles::exponential(1.0, 1.0);
        let path = sample_queue_path(&mut rng, &src, 0.0, 1e4).unwrap();
        let renewals = path.cycles.iter().filter(|c| c.end() <= 1e4).count() as f64;
        let rate = renewals / 1e4;
        assert!((rate - (-1.0f64).exp()).abs() / (-1.0f64).exp() < 0.01 * 3.0, "{rate}");
    }

    #[test]
    fn busy_cycles_match_poisson_triangle() {
        // cycles from an empty start, conditioned dormant at T, vs the Poisson
        // configuration on a window of length T
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let src = QueueCycles::exponential(1.0, 1.0);
        for &t in &[2.0, 5.0] {
            let (mut n1, mut a1, mut n2, mut a2) = (vec![], vec![], vec![], vec![]);
            while n1.len() < 20_000 {
                let p = sample_queue_path(&mut rng, &src, 0.0, t).unwrap();
                if !p.is_dormant_at(t) {
                    continue;
                }
                let cl: Vec<_> = p.clusters().into_iter().filter(|c| c.offset < t).collect();
                n1.push(cl.iter().map(|c| c.cluster.len()).sum::<usize>() as f64);
                a1.push(cl.iter().map(|c| c.cluster.active_length()).sum::<f64>());
            }
            for _ in 0..20_000 {
                let c = sample_poisson_configuration(&mut rng, 1.0, t / 2.0, 1.0).unwrap();
                n2.push(c.point_count() as f64);
                a2.push(c.active_time());
            }
            assert!(ks_two_sample(&n1, &n2).p_value > 0.01, "count at T={t}");
            assert!(ks_two_sample(&a1, &a2).p_value > 0.01, "active time at T={t}");
        }
    }

    fn stationary_checks(method: StationaryMethod, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = QueueCycles::exponential(1.0, 1.0);
        let s = StationaryWindowSampler::new(&src, &mut rng, 1000, method).unwrap();
        let (mut dorm, mut straddle, mut act1, mut act2) = (vec![], vec![], vec![], vec![]);
        for _ in 0..20_000 {
            let w = s.sample(&mut rng, 0.0, 8.0).unwrap();
            dorm.push(w.is_dormant_at(0.0) as u8 as f64);
            straddle.push(w.cycles[0].cycle.total());
            act1.push(1.0 - w.dormant_time(0.0, 1.0));
            act2.push(1.0 - w.dormant_time(7.0, 8.0));
        }
        let e = Estimate::from_samples(&dorm);
        assert!(e.within((-1.0f64).exp(), 3.0), "{method:?} {e:?}");
        // oracle E[T₁²]/E[T₁] from a long raw run
        let mut m1 = RunningStats::default();
        let mut m2 = RunningStats::default();
        for _ in 0..200_000 {
            let t = src.sample_cycle(&mut rng).unwrap().total();
            m1.push(t);
            m2.push(t * t);
        }
        let oracle = m2.mean() / m1.mean();
        let oracle_se = m2.se() / m1.mean();
        let sb = Estimate::from_samples(&straddle);
        assert!(sb.z_distance(&Estimate::new(oracle, oracle_se, 1)) < 3.0, "{method:?} {sb:?} vs {oracle}");
        assert!(ks_two_sample(&act1, &act2).p_value > 0.01);
    }

    #[test]
    fn stationary_window_burn_in() {
        stationary_checks(StationaryMethod::BurnIn { factor: 100.0 }, 34);
    }

    #[test]
    fn stationary_window_size_biased() {
        stationary_checks(StationaryMethod::SizeBiased { pool: 100_000 }, 35);
    }

    #[test]
    fn forward_recurrence_has_equilibrium_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let src = QueueCycles::exponential(1.0, 1.0);
        let mut ts: Vec<f64> = (0..200_000).map(|_| src.sample_cycle(&mut rng).unwrap().total()).collect();
        ts.sort_by(|a, b| a.total_cmp(b));
        let mean = ts.iter().sum::<f64>() / ts.len() as f64;
        // inverse CDF of G(x) = ∫₀^x P(T > y) dy / E[T] from the empirical survival function
        let n = ts.len() as f64;
        let mut knots = vec![(0.0, 0.0)];
        let (mut g, mut prev) = (0.0, 0.0);
        for (i, &t) in ts.iter().enumerate() {
            g += (t - prev) * (1.0 - i as f64 / n) / mean;
            knots.push((t, g));
            prev = t;
        }
        let inv = |p: f64| {
            let j = knots.partition_point(|k| k.1 < p).clamp(1, knots.len() - 1);
            let (x0, g0) = knots[j - 1];
            let (x1, g1) = knots[j];
            x0 + (p - g0) / (g1 - g0).max(1e-300) * (x1 - x0)
        };
        let oracle: Vec<f64> = (0..20_000).map(|_| inv(rng.random::<f64>() * g)).collect();
        let s = StationaryWindowSampler::new(&src, &mut rng, 1000, StationaryMethod::default()).unwrap();
        let fr: Vec<f64> = (0..20_000).map(|_| s.sample(&mut rng, 0.0, 1.0).unwrap().next_renewal_after(0.0).unwrap()).collect();
        assert!(ks_two_sample(&fr, &oracle).p_value > 0.01);
    }

    #[test]
    fn heavy_tail_guard_fires() {
        struct Pareto;
        impl CycleSource for Pareto {
            fn sample_cycle<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Cycle> {
                let u: f64 = rng.random();
                let d = u.powf(-1.0 / 0.6);
                Ok(Cycle { dormant: d, cluster: crate::cluster::Cluster::single(1e-9).unwrap() })
            }
            fn mean_cycle_length(&self) -> Option<f64> {
                None
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let r = StationaryWindowSampler::new(&Pareto, &mut rng, 100_000, StationaryMethod::default());
        assert!(matches!(r, Err(Error::HeavyTail(_))));
    }

    #[test]
    fn anscombe_renyi_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let exp1 = Exp::new(1.0).unwrap();
        let r = random_sum_clt_check(&mut rng, |r| r.sample(StandardNormal), |r| exp1.sample(r), 1.0, 1.0, 400.0, 2000);
        assert!(r.ks.p_value > 0.01, "{r:?}");
        let exp2 = Exp::new(2.0).unwrap();
        let r = random_sum_clt_check(&mut rng, |r| if r.random::<bool>() { 1.0 } else { -1.0 }, |r| exp2.sample(r), 0.5, 1.0, 400.0, 4000);
        assert!((r.variance / 2.0 - 1.0).abs() < 0.1, "{r:?}");
        let r = random_sum_clt_check(&mut rng, |r| 0.2 + r.sample::<f64, _>(StandardNormal), |r| exp1.sample(r), 1.0, 1.04, 400.0, 2000);
        assert!(r.ks.p_value < 0.01);
    }
}
