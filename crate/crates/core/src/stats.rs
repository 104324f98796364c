//! Small statistical toolbox: normal CDF, goodness-of-fit and rank tests,
//! effective sample sizes, log-space sums and weighted regression.

use statrs::function::erf::erfc;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Asymptotic Kolmogorov tail with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n_eff: f64) -> f64 {
    let sn = n_eff.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// One-sample KS statistic of `xs` against a continuous CDF.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_test(xs: &[f64], cdf: impl Fn(f64) -> f64) -> TestResult {
    let d = ks_statistic(xs, cdf);
    TestResult { statistic: d, p_value: ks_pvalue(d, xs.len() as f64) }
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.total_cmp(q));
    y.sort_by(|p, q| p.total_cmp(q));
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    TestResult { statistic: d, p_value: ks_pvalue(d, ne) }
}

/// Pearson chi-square for a 2×2 contingency table (1 degree of freedom).
pub fn chi_square_2x2(t: [[f64; 2]; 2]) -> TestResult {
    let total: f64 = t.iter().flatten().sum();
    let rows = [t[0][0] + t[0][1], t[1][0] + t[1][1]];
    let cols = [t[0][0] + t[1][0], t[0][1] + t[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / total;
            if e > 0.0 {
                stat += (t[i][j] - e).powi(2) / e;
            }
        }
    }
    TestResult { statistic: stat, p_value: erfc((stat / 2.0).sqrt()) }
}

fn average_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// One-sided Mann–Whitney test, alternative "x stochastically larger than y".
/// Normal approximation with tie and continuity corrections.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> TestResult {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, tie_term) = average_ranks(&all);
    let rx: f64 = ranks[..x.len()].iter().sum();
    let u = rx - n * (n + 1.0) / 2.0;
    let big_n = n + m;
    let var = n * m / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return TestResult { statistic: u, p_value: 1.0 };
    }
    let z = (u - n * m / 2.0 - 0.5) / var.sqrt();
    TestResult { statistic: u, p_value: 1.0 - normal_cdf(z) }
}

/// Kish effective sample size of nonnegative weights.
pub fn weights_ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// ESS of a Markov chain trace by Geyer's initial positive sequence.
pub fn chain_ess(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let c0 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        (0..n - lag).map(|i| (xs[i] - mean) * (xs[i + lag] - mean)).sum::<f64>() / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (n as f64 / tau.max(1.0)).min(n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
}

/// Weighted least squares with weights 1/σ²; SEs from the known σ.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], sigma: &[f64]) -> LinearFit {
    let w: Vec<f64> = sigma.iter().map(|s| if *s > 0.0 { 1.0 / (s * s) } else { 1e12 }).collect();
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let sy: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = w.iter().zip(x).map(|(a, b)| a * b * b).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((a, b), c)| a * b * c).sum();
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    LinearFit {
        slope,
        intercept,
        slope_se: (sw / det).sqrt(),
        intercept_se: (sxx / det).sqrt(),
    }
}

/// Linear interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-9, "{}", normal_cdf(1.959963984540054));
    }

    #[test]
    fn kolmogorov_tail_reference_point() {
        // P(K > 1.358) ≈ 0.05 asymptotically
        let p = ks_pvalue(1.358 / 1e4f64.sqrt(), 1e4);
        assert!((p - 0.05).abs() < 2e-3, "{p}");
    }

    #[test]
    fn ks_accepts_normal_rejects_shifted() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(ks_test(&xs, normal_cdf).p_value > 0.01);
        let ys: Vec<f64> = xs.iter().map(|x| x + 0.3).collect();
        assert!(ks_test(&ys, normal_cdf).p_value < 1e-6);
        assert!(ks_two_sample(&xs, &ys).p_value < 1e-6);
    }

    #[test]
    fn chi_square_independent_table() {
        let r = chi_square_2x2([[25.0, 25.0], [25.0, 25.0]]);
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        // 3.841 is the 95% point of chi-square(1)
        let r = chi_square_2x2([[60.0, 40.0], [40.0, 60.0]]);
        assert!((r.statistic - 8.0).abs() < 1e-12);
        assert!((erfc((3.841458820694124f64 / 2.0).sqrt()) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn mann_whitney_direction() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 + 10.0).collect();
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(mann_whitney_greater(&x, &y).p_value < 0.01);
        assert!(mann_whitney_greater(&y, &x).p_value > 0.99);
    }

    #[test]
    fn ess_of_iid_and_constant_weights() {
        assert_eq!(weights_ess(&[1.0; 10]), 10.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..4000).map(|_| rng.sample(StandardNormal)).collect();
        let e = chain_ess(&xs);
        assert!(e > 3000.0, "{e}");
        let mut ar = vec![0.0f64; 4000];
        for i in 1..4000 {
            ar[i] = 0.9 * ar[i - 1] + xs[i];
        }
        let e = chain_ess(&ar);
        // AR(1) with ρ = 0.9 has integrated time (1+ρ)/(1−ρ) = 19
        assert!(e > 100.0 && e < 400.0, "{e}");
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|t| 2.0 * t - 1.0).collect();
        let f = weighted_linear_fit(&x, &y, &[0.1; 4]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
    }
}
