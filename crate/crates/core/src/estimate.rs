//! Monte Carlo estimates and streaming moment accumulators.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub n: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub flags: Vec<String>,
}

impl Estimate {
    pub fn new(value: f64, se: f64, n: u64) -> Self {
        Self { value, se: se.max(0.0), n: n.max(1), seed: None, flags: Vec::new() }
    }

    pub fn exact(value: f64) -> Self {
        Self::new(value, 0.0, 1)
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let mut s = RunningStats::default();
        xs.iter().for_each(|&x| s.push(x));
        s.estimate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn flag(mut self, f: impl Into<String>) -> Self {
        self.flags.push(f.into());
        self
    }

    /// |self − other| in units of the combined standard error.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        let se = self.se.hypot(other.se);
        let diff = (self.value - other.value).abs();
        if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.se
    }

    pub fn ci(&self, z: f64) -> (f64, f64) {
        (self.value - z * self.se, self.value + z * self.se)
    }
}

/// Welford accumulator; merging partial results is order-independent up to
/// floating point rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
    max: f64,
    sum_abs: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        self.max = if self.n == 1 { x } else { self.max.max(x) };
        self.sum_abs += x.abs();
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.max = self.max.max(other.max);
        self.sum_abs += other.sum_abs;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn se(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    /// Share of the absolute sum carried by the largest sample.
    pub fn max_share(&self) -> f64 {
        if self.sum_abs > 0.0 {
            self.max.abs() / self.sum_abs
        } else {
            0.0
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.mean, self.se(), self.n)
    }
}

/// Ratio estimator mean(y)/mean(x) with delta-method standard error.
pub fn ratio_estimate(y: &[f64], x: &[f64]) -> Estimate {
    assert_eq!(y.len(), x.len());
    let n = y.len();
    if n == 0 {
        return Estimate::new(f64::NAN, f64::NAN, 1);
    }
    let my = y.iter().sum::<f64>() / n as f64;
    let mx = x.iter().sum::<f64>() / n as f64;
    let r = my / mx;
    if n < 2 {
        return Estimate::new(r, 0.0, 1);
    }
    let var = y.iter().zip(x).map(|(a, b)| (a - r * b).powi(2)).sum::<f64>() / (n - 1) as f64;
    Estimate::new(r, (var / n as f64).sqrt() / mx.abs(), n as u64)
}
