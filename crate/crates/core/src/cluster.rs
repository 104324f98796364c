//! Busy cycles of the M/G/∞ queue and Poisson interval configurations.
//!
//! A customer arriving at `s` with service time `τ` occupies `[s, s+τ]`.
//! Overlapping intervals chain into a cluster, which is exactly one busy
//! period of the queue; a cycle is a dormant stretch followed by a cluster.

use crate::error::{check, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};

/// Hard cap on customers in one busy period.
pub const MAX_CUSTOMERS: u64 = 1_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn shifted(&self, by: f64) -> Interval {
        Interval::new(self.start + by, self.end + by)
    }
}

/// Overlapping intervals in cluster-relative time: `s₁ = 0`, starts sorted,
/// union `[0, a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    intervals: Vec<Interval>,
    active_length: f64,
}

impl Cluster {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        check(!intervals.is_empty(), || "cluster needs at least one interval".into())?;
        check(intervals[0].start == 0.0, || format!("first start must be 0, got {}", intervals[0].start))?;
        let mut reach = f64::NEG_INFINITY;
        for (i, iv) in intervals.iter().enumerate() {
            check(iv.start < iv.end && iv.end.is_finite(), || format!("interval {i} is empty or infinite: {iv:?}"))?;
            if i > 0 {
                check(iv.start >= intervals[i - 1].start, || format!("interval {i} starts out of order"))?;
                check(iv.start <= reach, || format!("interval {i} is disconnected from its predecessors"))?;
            }
            reach = reach.max(iv.end);
        }
        Ok(Self { intervals, active_length: reach })
    }

    /// Single interval `[0, len]`.
    pub fn single(len: f64) -> Result<Self> {
        Self::new(vec![Interval::new(0.0, len)])
    }

    /// Shift absolute intervals so the first start is 0; returns (offset, cluster).
    pub fn from_absolute(mut intervals: Vec<Interval>) -> Result<(f64, Self)> {
        intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
        let off = intervals.first().map(|iv| iv.start).unwrap_or(0.0);
        let rel = intervals.iter().map(|iv| iv.shifted(-off)).collect::<Vec<_>>();
        // exact zero for the first start regardless of rounding
        let mut rel = rel;
        if let Some(first) = rel.first_mut() {
            first.start = 0.0;
        }
        Ok((off, Self::new(rel)?))
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn active_length(&self) -> f64 {
        self.active_length
    }

    /// Interarrival gaps `σ_i = s_{i+1} − s_i`; the last one is `+∞`
    /// (the next arrival lands after the cluster has closed).
    pub fn gaps(&self) -> Vec<f64> {
        let mut g: Vec<f64> = self.intervals.windows(2).map(|w| w[1].start - w[0].start).collect();
        g.push(f64::INFINITY);
        g
    }

    pub fn service_times(&self) -> Vec<f64> {
        self.intervals.iter().map(Interval::len).collect()
    }

    /// `"s:t;s:t;..."`
    pub fn interval_string(&self) -> String {
        self.intervals.iter().map(|iv| format!("{}:{}", iv.start, iv.end)).collect::<Vec<_>>().join(";")
    }

    /// Remove interval `j`; the rest need not stay connected.
    pub fn without(&self, j: usize) -> Vec<Interval> {
        self.intervals.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, iv)| *iv).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub dormant: f64,
    pub cluster: Cluster,
}

impl Cycle {
    pub fn total(&self) -> f64 {
        self.dormant + self.cluster.active_length()
    }
}

pub trait ServiceSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
    fn mean(&self) -> f64;
    /// `P(τ > t)`
    fn survival(&self, t: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpService {
    pub rate: f64,
}

impl ServiceSampler for ExpService {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let e: f64 = Exp1.sample(rng);
        e / self.rate
    }

    fn mean(&self) -> f64 {
        1.0 / self.rate
    }

    fn survival(&self, t: f64) -> f64 {
        (-self.rate * t.max(0.0)).exp()
    }
}

/// Deterministic service, handy for renewal tests with non-exponential laws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedService {
    pub duration: f64,
}

impl ServiceSampler for FixedService {
    fn sample<R: Rng + ?Sized>(&self, _rng: &mut R) -> f64 {
        self.duration
    }

    fn mean(&self) -> f64 {
        self.duration
    }

    fn survival(&self, t: f64) -> f64 {
        if t < self.duration {
            1.0
        } else {
            0.0
        }
    }
}

fn exp_draw<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e / rate
}

/// Busy cluster started by an arrival at time 0. Closes when the next
/// arrival finds the system empty.
pub fn sample_cluster_with<R: Rng + ?Sized, S: ServiceSampler>(rng: &mut R, alpha: f64, service: &S) -> Result<Cluster> {
    let mut intervals = Vec::new();
    let first = service.sample(rng);
    intervals.push(Interval::new(0.0, first));
    let mut reach = first;
    let mut s = 0.0;
    loop {
        s += exp_draw(rng, alpha);
        if s > reach {
            break;
        }
        if intervals.len() as u64 >= MAX_CUSTOMERS {
            return Err(Error::NonTerminatingCycle(MAX_CUSTOMERS));
        }
        let t = s + service.sample(rng);
        reach = reach.max(t);
        intervals.push(Interval::new(s, t));
    }
    Ok(Cluster { intervals, active_length: reach })
}

pub fn sample_busy_cycle_with<R: Rng + ?Sized, S: ServiceSampler>(rng: &mut R, alpha: f64, service: &S) -> Result<Cycle> {
    check(alpha > 0.0 && alpha.is_finite(), || format!("alpha = {alpha} must be positive"))?;
    let dormant = exp_draw(rng, alpha);
    let cluster = sample_cluster_with(rng, alpha, service)?;
    Ok(Cycle { dormant, cluster })
}

/// One busy cycle with Poisson(α) arrivals and Exp(β) services.
pub fn sample_busy_cycle<R: Rng + ?Sized>(rng: &mut R, alpha: f64, beta: f64) -> Result<Cycle> {
    check(beta > 0.0 && beta.is_finite(), || format!("beta = {beta} must be positive"))?;
    sample_busy_cycle_with(rng, alpha, &ExpService { rate: beta })
}

/// `c_{α,T} = ∫∫_{−T<s<t<T} α g(t−s) ds dt = 2αT − α(1 − e^{−2βT})/β`.
pub fn intensity_mass(alpha: f64, t_half: f64, beta: f64) -> f64 {
    2.0 * alpha * t_half + alpha * (-2.0 * beta * t_half).exp_m1() / beta
}

/// `E[T₁] = e^{α/β}/α`.
pub fn expected_cycle_length(alpha: f64, beta: f64) -> f64 {
    (alpha / beta).exp() / alpha
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Dormant,
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedCluster {
    pub offset: f64,
    pub cluster: Cluster,
}

impl PlacedCluster {
    pub fn span(&self) -> Interval {
        Interval::new(self.offset, self.offset + self.cluster.active_length())
    }

    pub fn absolute_intervals(&self) -> impl Iterator<Item = Interval> + '_ {
        self.cluster.intervals().iter().map(move |iv| iv.shifted(self.offset))
    }
}

/// Clusters placed on a window `[A, B]`, sorted by offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub window: (f64, f64),
    pub clusters: Vec<PlacedCluster>,
    pub left: Boundary,
    pub right: Boundary,
}

impl Configuration {
    /// Group intervals into maximal overlapping clusters by a sweep over
    /// sorted starts; touching endpoints count as overlapping.
    pub fn from_intervals(window: (f64, f64), mut intervals: Vec<Interval>) -> Result<Self> {
        intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
        let mut clusters = Vec::new();
        let mut current: Vec<Interval> = Vec::new();
        let mut reach = f64::NEG_INFINITY;
        for iv in intervals {
            if !current.is_empty() && iv.start > reach {
                let (off, c) = Cluster::from_absolute(std::mem::take(&mut current))?;
                clusters.push(PlacedCluster { offset: off, cluster: c });
                reach = f64::NEG_INFINITY;
            }
            reach = reach.max(iv.end);
            current.push(iv);
        }
        if !current.is_empty() {
            let (off, c) = Cluster::from_absolute(current)?;
            clusters.push(PlacedCluster { offset: off, cluster: c });
        }
        let mut cfg = Configuration { window, clusters, left: Boundary::Dormant, right: Boundary::Dormant };
        cfg.update_boundaries();
        Ok(cfg)
    }

    fn update_boundaries(&mut self) {
        let (a, b) = self.window;
        self.left = if self.clusters.iter().any(|c| c.offset < a) { Boundary::Truncated } else { Boundary::Dormant };
        self.right = if self.clusters.iter().any(|c| c.span().end > b) { Boundary::Truncated } else { Boundary::Dormant };
    }

    pub fn point_count(&self) -> usize {
        self.clusters.iter().map(|c| c.cluster.len()).sum()
    }

    pub fn active_time(&self) -> f64 {
        self.clusters.iter().map(|c| c.cluster.active_length()).sum()
    }

    pub fn is_dormant_at(&self, t: f64) -> bool {
        !self.clusters.iter().any(|c| {
            let s = c.span();
            s.start <= t && t <= s.end
        })
    }

    /// Keep the clusters whose span meets `[a, b]`.
    pub fn restrict(&self, a: f64, b: f64) -> Configuration {
        let clusters = self
            .clusters
            .iter()
            .filter(|c| {
                let s = c.span();
                s.start <= b && s.end >= a
            })
            .cloned()
            .collect();
        let mut cfg = Configuration { window: (a, b), clusters, left: Boundary::Dormant, right: Boundary::Dormant };
        cfg.update_boundaries();
        cfg
    }
}

/// Poisson process on the triangle `−T < s < t < T` with intensity
/// `α g(t−s) ds dt`, grouped into clusters.
pub fn sample_poisson_configuration<R: Rng + ?Sized>(rng: &mut R, alpha: f64, t_half: f64, beta: f64) -> Result<Configuration> {
    check(alpha > 0.0 && beta > 0.0, || format!("alpha, beta must be positive: {alpha}, {beta}"))?;
    check(t_half > 0.0 && t_half.is_finite(), || format!("T = {t_half} must be positive"))?;
    let mass = intensity_mass(alpha, t_half, beta);
    let k = if mass > 0.0 {
        let p = Poisson::new(mass).map_err(|e| Error::Numerical(e.to_string()))?;
        let k: f64 = p.sample(rng);
        k as usize
    } else {
        0
    };
    let width = 2.0 * t_half;
    let mut intervals = Vec::with_capacity(k);
    for _ in 0..k {
        // length density ∝ g(τ)(2T − τ) on (0, 2T): Exp(β) proposal, accept w.p. (2T−τ)/2T
        let tau = loop {
            let tau = exp_draw(rng, beta);
            if tau < width && rng.random::<f64>() * width < width - tau {
                break tau;
            }
        };
        let s = -t_half + rng.random::<f64>() * (width - tau);
        intervals.push(Interval::new(s, s + tau));
    }
    Configuration::from_intervals((-t_half, t_half), intervals)
}
