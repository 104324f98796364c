//! Pair potentials `w(t, x)` and their split `w = g·v` with
//! `g(t) = β e^{−βt}`.
//!
//! Completely monotone potentials also carry their Bernstein representation
//! `v(t, x) = ∫ e^{−u²|x|²/2} μ_t(du)`, which the Gaussian engine uses to turn
//! Brownian expectations into determinants.

use crate::error::{check, Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const NELSON_QUAD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PotentialKind {
    /// `w = e^{−t}/|x|` in three dimensions.
    Frohlich,
    /// `w = 4π ∫_κ^Λ e^{−rt} sin(r|x|)/|x| dr` in three dimensions.
    Nelson { kappa: f64, lambda_uv: f64 },
    /// `w = c e^{−decay·t} e^{−|x|²/(2ℓ²)}`.
    BoundedExponential { c: f64, decay: f64, ell: f64 },
    /// `w = rate·e^{−rate·t}`, i.e. `v ≡ 1` when `β = rate`.
    Trivial { rate: f64 },
}

/// Mixing measure `μ_t = Σ w_k δ_{u_k} + c·du` on `[0, ∞)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BernsteinMeasure {
    pub atoms: Vec<(f64, f64)>,
    pub continuous: f64,
}

impl BernsteinMeasure {
    fn push_atom(&mut self, u: f64, w: f64) {
        if w == 0.0 {
            return;
        }
        match self.atoms.iter_mut().find(|(a, _)| *a == u) {
            Some(slot) => slot.1 += w,
            None => self.atoms.push((u, w)),
        }
    }

    /// A single atom: the mark is deterministic.
    pub fn is_degenerate(&self) -> bool {
        self.continuous == 0.0 && self.atoms.len() == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    kind: PotentialKind,
    beta: f64,
    shift: f64,
    dimension: usize,
}

impl Potential {
    pub fn frohlich() -> Self {
        Self { kind: PotentialKind::Frohlich, beta: 1.0, shift: 0.0, dimension: 3 }
    }

    pub fn nelson(kappa: f64, lambda_uv: f64) -> Result<Self> {
        check(kappa >= 0.0 && kappa.is_finite(), || format!("nelson: kappa = {kappa} must be ≥ 0"))?;
        check(lambda_uv > kappa && lambda_uv.is_finite(), || {
            format!("nelson: need kappa < lambda_uv < ∞, got {kappa} and {lambda_uv}")
        })?;
        Ok(Self { kind: PotentialKind::Nelson { kappa, lambda_uv }, beta: 1.0, shift: 0.0, dimension: 3 })
    }

    pub fn bounded_exponential(c: f64, beta: f64, ell: f64) -> Result<Self> {
        for (name, x) in [("c", c), ("beta", beta), ("ell", ell)] {
            check(x > 0.0 && x.is_finite(), || format!("bounded_exp: {name} = {x} must be positive"))?;
        }
        Ok(Self {
            kind: PotentialKind::BoundedExponential { c, decay: beta, ell },
            beta,
            shift: 0.0,
            dimension: 3,
        })
    }

    pub fn trivial(beta: f64) -> Result<Self> {
        check(beta > 0.0 && beta.is_finite(), || format!("trivial: beta = {beta} must be positive"))?;
        Ok(Self { kind: PotentialKind::Trivial { rate: beta }, beta, shift: 0.0, dimension: 3 })
    }

    /// Build from a config key and a parameter lookup.
    pub fn from_key(name: &str, param: impl Fn(&str) -> Option<f64>) -> Result<Self> {
        let need = |k: &str| param(k).ok_or_else(|| Error::InvalidParameter(format!("{name}: missing parameter {k}")));
        let mut pot = match name {
            "frohlich" => Self::frohlich(),
            "nelson" => Self::nelson(need("kappa")?, need("lambda_uv")?)?,
            "bounded_exp" => Self::bounded_exponential(need("c")?, need("beta")?, need("ell")?)?,
            "trivial" => Self::trivial(param("beta").unwrap_or(1.0))?,
            other => return Err(Error::InvalidParameter(format!("unknown potential key {other:?}"))),
        };
        if name == "nelson" || name == "frohlich" {
            if let Some(b) = param("beta") {
                pot = pot.with_beta(b)?;
            }
        }
        if let Some(d) = param("dimension") {
            pot = pot.with_dimension(d as usize)?;
        }
        if let Some(c) = param("shift") {
            pot = pot.shift_by_g(c)?;
        }
        Ok(pot)
    }

    pub fn key(&self) -> &'static str {
        match self.kind {
            PotentialKind::Frohlich => "frohlich",
            PotentialKind::Nelson { .. } => "nelson",
            PotentialKind::BoundedExponential { .. } => "bounded_exp",
            PotentialKind::Trivial { .. } => "trivial",
        }
    }

    /// Re-split the same `w` with a different time rate `β`.
    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        check(beta > 0.0 && beta.is_finite(), || format!("beta = {beta} must be positive"))?;
        check(self.shift == 0.0, || "change beta before shifting".into())?;
        self.beta = beta;
        Ok(self)
    }

    /// Spatial dimension; only the Gaussian-profile families are dimension free.
    pub fn with_dimension(mut self, d: usize) -> Result<Self> {
        let free = matches!(self.kind, PotentialKind::BoundedExponential { .. } | PotentialKind::Trivial { .. });
        check(d >= 1 && (free || d == 3), || format!("{}: dimension {d} not supported", self.key()))?;
        self.dimension = d;
        Ok(self)
    }

    /// `w ↦ w + c·g`, i.e. `v ↦ v + c`.
    pub fn shift_by_g(mut self, c: f64) -> Result<Self> {
        check(c.is_finite() && self.shift + c >= 0.0, || format!("shift {c} would make v negative"))?;
        self.shift += c;
        Ok(self)
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn g(&self, t: f64) -> f64 {
        self.beta * (-self.beta * t.abs()).exp()
    }

    pub fn rotationally_symmetric(&self) -> bool {
        true
    }

    pub fn quasiconcave_in_x(&self) -> bool {
        !matches!(self.kind, PotentialKind::Nelson { .. })
    }

    pub fn completely_monotone(&self) -> bool {
        !matches!(self.kind, PotentialKind::Nelson { .. })
    }

    /// `v ≡ const`: every F is a deterministic power.
    pub fn is_constant_v(&self) -> bool {
        matches!(self.kind, PotentialKind::Trivial { rate } if rate == self.beta)
    }

    fn base_w(&self, t: f64, r: f64) -> f64 {
        match self.kind {
            PotentialKind::Frohlich => {
                if r == 0.0 {
                    f64::INFINITY
                } else {
                    (-t).exp() / r
                }
            }
            PotentialKind::Nelson { kappa, lambda_uv } => nelson_w(kappa, lambda_uv, t, r),
            PotentialKind::BoundedExponential { c, decay, ell } => {
                c * (-decay * t).exp() * (-r * r / (2.0 * ell * ell)).exp()
            }
            PotentialKind::Trivial { rate } => rate * (-rate * t).exp(),
        }
    }

    fn base_v(&self, t: f64, r: f64) -> f64 {
        let b = self.beta;
        match self.kind {
            PotentialKind::Frohlich => {
                if r == 0.0 {
                    f64::INFINITY
                } else {
                    ((b - 1.0) * t).exp() / (b * r)
                }
            }
            PotentialKind::Nelson { kappa, lambda_uv } => nelson_w(kappa, lambda_uv, t, r) * (b * t).exp() / b,
            PotentialKind::BoundedExponential { c, decay, ell } => {
                c / b * ((b - decay) * t).exp() * (-r * r / (2.0 * ell * ell)).exp()
            }
            PotentialKind::Trivial { rate } => rate / b * ((b - rate) * t).exp(),
        }
    }

    pub fn eval_w(&self, t: f64, x: &[f64]) -> f64 {
        let t = t.abs();
        self.base_w(t, norm(x)) + self.shift * self.g(t)
    }

    pub fn eval_v(&self, t: f64, x: &[f64]) -> f64 {
        self.eval_v_radial(t, norm(x))
    }

    pub fn eval_v_radial(&self, t: f64, r: f64) -> f64 {
        self.base_v(t.abs(), r) + self.shift
    }

    /// Mixing measure of `x ↦ v(t, x)`; `None` unless completely monotone.
    pub fn bernstein(&self, t: f64) -> Option<BernsteinMeasure> {
        let b = self.beta;
        let mut m = BernsteinMeasure { atoms: Vec::new(), continuous: 0.0 };
        match self.kind {
            PotentialKind::Frohlich => m.continuous = (2.0 / PI).sqrt() * ((b - 1.0) * t).exp() / b,
            PotentialKind::Nelson { .. } => return None,
            PotentialKind::BoundedExponential { c, decay, ell } => {
                m.push_atom(1.0 / ell, c / b * ((b - decay) * t).exp())
            }
            PotentialKind::Trivial { rate } => m.push_atom(0.0, rate / b * ((b - rate) * t).exp()),
        }
        m.push_atom(0.0, self.shift);
        Some(m)
    }

    /// `h(t₁, t₂) = E_𝒲[v(t₁, X_{t₂})]` from the Bernstein measure.
    pub fn h(&self, t1: f64, t2: f64) -> Option<f64> {
        let m = self.bernstein(t1)?;
        let d = self.dimension as f64;
        let mut h: f64 = m.atoms.iter().map(|&(u, w)| w * (1.0 + u * u * t2).powf(-d / 2.0)).sum();
        if m.continuous > 0.0 {
            // ∫₀^∞ (1+u²t)^{−3/2} du = t^{−1/2}
            h += m.continuous / t2.sqrt();
        }
        Some(h)
    }

    pub fn closed_form_h(&self, t1: f64, t2: f64) -> Option<f64> {
        self.h(t1, t2)
    }

    /// `w̃_β(r) = sup_t e^{βt} w(t, r)`.
    pub fn w_beta_sup(&self, beta: f64, r: f64) -> Result<f64> {
        check(beta > 0.0 && r > 0.0, || format!("w_beta_sup needs beta > 0 and r > 0, got {beta}, {r}"))?;
        // (amplitude, decay) pairs of the pure-exponential parts
        let mut terms: Vec<(f64, f64)> = Vec::new();
        match self.kind {
            PotentialKind::Frohlich => terms.push((1.0 / r, 1.0)),
            PotentialKind::BoundedExponential { c, decay, ell } => {
                terms.push((c * (-r * r / (2.0 * ell * ell)).exp(), decay))
            }
            PotentialKind::Trivial { rate } => terms.push((rate, rate)),
            PotentialKind::Nelson { .. } => {}
        }
        if self.shift > 0.0 {
            terms.push((self.shift * self.beta, self.beta));
        }
        if let Some(&(_, k)) = terms.iter().find(|&&(a, k)| a > 0.0 && beta > k) {
            return Err(Error::Divergent(format!("beta {beta} exceeds time decay rate {k}")));
        }
        match self.kind {
            PotentialKind::Nelson { .. } => {
                let f = |t: f64| (beta * t).exp() * self.eval_w(t, &[r, 0.0, 0.0]);
                grid_sup(f)
            }
            _ => Ok(terms.iter().map(|(a, _)| a).sum()),
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn nelson_w(kappa: f64, lambda_uv: f64, t: f64, r: f64) -> f64 {
    let integrand = |k: f64| {
        let s = if r == 0.0 { k } else { (k * r).sin() / r };
        (-k * t).exp() * s
    };
    4.0 * PI * quadrature::double_exponential::integrate(integrand, kappa, lambda_uv, NELSON_QUAD_TOL).integral
}

/// Supremum of `f` on `[0, ∞)` by a geometric grid and golden-section
/// refinement; growth at the far end of the grid counts as divergence.
fn grid_sup(f: impl Fn(f64) -> f64) -> Result<f64> {
    let mut ts = vec![0.0];
    let mut t = 1e-4;
    while t < 400.0 {
        ts.push(t);
        t *= 1.1;
    }
    let vals: Vec<f64> = ts.iter().map(|&t| f(t)).collect();
    let n = vals.len();
    if vals[n - 1] > vals[n - 2] && vals[n - 1] > 0.0 && vals[n - 1] >= vals.iter().copied().fold(f64::MIN, f64::max) {
        return Err(Error::Divergent("e^{βt} w(t, r) still growing at the end of the search grid".into()));
    }
    let (imax, _) = vals.iter().enumerate().fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let lo = ts[imax.saturating_sub(1)];
    let hi = ts[(imax + 1).min(n - 1)];
    let (mut a, mut b) = (lo, hi);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) >= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(vals[imax].max(f(0.5 * (a + b))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_potentials() -> Vec<Potential> {
        vec![
            Potential::frohlich(),
            Potential::frohlich().with_beta(0.7).unwrap(),
            Potential::nelson(1.0, 2.0).unwrap(),
            Potential::nelson(0.0, 3.0).unwrap().with_beta(2.0).unwrap(),
            Potential::bounded_exponential(0.3, 1.5, 0.8).unwrap(),
            Potential::trivial(1.0).unwrap(),
            Potential::trivial(1.0).unwrap().shift_by_g(1.0).unwrap(),
            Potential::frohlich().shift_by_g(0.25).unwrap(),
        ]
    }

    #[test]
    fn frohlich_reference_values() {
        let p = Potential::frohlich();
        assert_eq!(p.eval_w(0.0, &[1.0, 0.0, 0.0]), 1.0);
        assert!((p.eval_w(2f64.ln(), &[0.0, 2.0, 0.0]) - 0.25).abs() < 1e-15);
        assert_eq!(p.eval_w(0.3, &[0.0; 3]), f64::INFINITY);
        assert!((p.eval_v(5.0, &[0.0, 0.0, 4.0]) - 0.25).abs() < 1e-15);
        assert!((p.closed_form_h(0.2, 4.0).unwrap() - (2.0 / PI).sqrt() / 2.0).abs() < 1e-15);
        let m = p.bernstein(1.0).unwrap();
        assert!((m.continuous - (2.0 / PI).sqrt()).abs() < 1e-15 && m.atoms.is_empty());
    }

    #[test]
    fn frohlich_bernstein_integral_reproduces_v() {
        // ∫₀^∞ √(2/π) e^{−u²r²/2} du = 1/r, by quadrature
        let r = 1.7;
        let m = Potential::frohlich().bernstein(0.0).unwrap();
        let q = quadrature::double_exponential::integrate(|u: f64| (-u * u * r * r / 2.0).exp(), 0.0, 40.0, 1e-13);
        assert!((m.continuous * q.integral - 1.0 / r).abs() < 1e-10);
    }

    #[test]
    fn nelson_matches_antiderivative() {
        // ∫ e^{−kt} sin(ks) dk = −e^{−kt}(t sin(ks) + s cos(ks))/(t²+s²)
        let (kappa, lam) = (1.0, 2.0);
        let p = Potential::nelson(kappa, lam).unwrap();
        for &(t, s) in &[(0.0, 0.7), (0.3, 1.1), (2.0, PI), (5.0, 0.2)] {
            let prim = |k: f64| -(-k * t).exp() * (t * (k * s).sin() + s * (k * s).cos()) / (t * t + s * s);
            let exact = 4.0 * PI / s * (prim(lam) - prim(kappa));
            let got = p.eval_w(t, &[0.0, s, 0.0]);
            assert!((got - exact).abs() < 1e-9, "t={t} s={s}: {got} vs {exact}");
        }
        assert!((p.eval_w(0.0, &[0.0; 3]) - 2.0 * PI * (lam * lam - kappa * kappa)).abs() < 1e-9);
        assert!(p.eval_w(0.0, &[PI, 0.0, 0.0]) < 0.0, "Nelson w changes sign");
    }

    #[test]
    fn nelson_large_t_decay_dominated_by_kappa() {
        let p = Potential::nelson(1.0, 2.0).unwrap();
        let ratios: Vec<f64> = [1.0, 5.0, 10.0, 20.0, 40.0].iter().map(|&t| p.eval_w(t, &[0.0; 3]) / (-t).exp()).collect();
        assert!(ratios.iter().all(|r| r.is_finite() && *r < 20.0));
        assert!(ratios.windows(2).skip(1).all(|w| w[1] < w[0]));
    }

    #[test]
    fn nelson_rejects_bad_cutoffs() {
        assert!(Potential::nelson(2.0, 2.0).is_err());
        assert!(Potential::nelson(3.0, 2.0).is_err());
        assert!(Potential::nelson(-1.0, 2.0).is_err());
    }

    #[test]
    fn bounded_exponential_and_trivial() {
        let p = Potential::bounded_exponential(0.4, 2.0, 1.5).unwrap();
        assert_eq!(p.eval_w(0.0, &[0.0; 3]), 0.4);
        assert!((p.eval_v(0.9, &[1.5, 0.0, 0.0]) - 0.2 * (-0.5f64).exp()).abs() < 1e-15);
        let t = Potential::trivial(2.0).unwrap();
        assert_eq!(t.eval_v(3.0, &[1.0, 2.0, 3.0]), 1.0);
        assert!(t.is_constant_v());
        assert_eq!(t.clone().shift_by_g(1.0).unwrap().eval_v(1.0, &[0.5; 3]), 2.0);
        let m = t.shift_by_g(1.0).unwrap().bernstein(0.3).unwrap();
        assert!(m.is_degenerate());
        assert_eq!(m.atoms, vec![(0.0, 2.0)]);
    }

    #[test]
    fn h_for_gaussian_profile_is_gaussian_integral() {
        let p = Potential::bounded_exponential(0.5, 1.0, 2.0).unwrap();
        let t2 = 3.0f64;
        let want = 0.5 * (1.0 + t2 / 4.0).powf(-1.5);
        assert!((p.h(0.0, t2).unwrap() - want).abs() < 1e-15);
        assert!(Potential::nelson(1.0, 2.0).unwrap().h(0.0, 1.0).is_none());
    }

    #[test]
    fn w_beta_sup_cases() {
        let f = Potential::frohlich();
        assert!((f.w_beta_sup(1.0, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((f.w_beta_sup(0.5, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(f.w_beta_sup(2.0, 1.0), Err(Error::Divergent(_))));
        let be = Potential::bounded_exponential(0.3, 1.2, 0.9).unwrap();
        let r = 0.6;
        assert!((be.w_beta_sup(1.2, r).unwrap() - 0.3 * (-r * r / (2.0 * 0.81f64)).exp()).abs() < 1e-15);
        let nel = Potential::nelson(1.0, 2.0).unwrap();
        let s = nel.w_beta_sup(0.5, 0.3).unwrap();
        assert!(s >= nel.eval_w(0.0, &[0.3, 0.0, 0.0]) - 1e-12);
        assert!(matches!(nel.w_beta_sup(1.5, 0.3), Err(Error::Divergent(_))));
    }

    #[test]
    fn from_key_round_trip() {
        let p = Potential::from_key("bounded_exp", |k| match k {
            "c" => Some(0.2),
            "beta" => Some(1.0),
            "ell" => Some(1.0),
            _ => None,
        })
        .unwrap();
        assert_eq!(p, Potential::bounded_exponential(0.2, 1.0, 1.0).unwrap());
        assert!(Potential::from_key("yukawa", |_| None).is_err());
        assert!(Potential::from_key("nelson", |_| None).is_err());
    }

    fn rotate(x: [f64; 3], a: f64, b: f64) -> [f64; 3] {
        let (s, c) = a.sin_cos();
        let y = [c * x[0] - s * x[1], s * x[0] + c * x[1], x[2]];
        let (s, c) = b.sin_cos();
        [y[0], c * y[1] - s * y[2], s * y[1] + c * y[2]]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(400))]

        #[test]
        fn decomposition_symmetry_rotation(t in 0.0f64..6.0, x in prop::array::uniform3(-3.0f64..3.0),
                                            a in 0.0f64..6.3, b in 0.0f64..6.3) {
            for p in all_potentials() {
                let w = p.eval_w(t, &x);
                let gv = p.g(t) * p.eval_v(t, &x);
                prop_assert!((gv - w).abs() <= 1e-12 * w.abs().max(1e-300), "{:?}: {} vs {}", p.kind(), gv, w);
                let neg = [-x[0], -x[1], -x[2]];
                prop_assert!((p.eval_w(t, &neg) - w).abs() <= 1e-12 * w.abs());
                let rx = rotate(x, a, b);
                prop_assert!((p.eval_w(t, &rx) - w).abs() <= 1e-9 * w.abs().max(1e-9));
            }
        }

        #[test]
        fn quasiconcavity(t in 0.0f64..4.0, x in prop::array::uniform3(-3.0f64..3.0),
                          y in prop::array::uniform3(-3.0f64..3.0), th in 0.0f64..1.0) {
            for p in all_potentials().into_iter().filter(|p| p.quasiconcave_in_x()) {
                let z: Vec<f64> = (0..3).map(|i| th * x[i] + (1.0 - th) * y[i]).collect();
                let lhs = p.eval_w(t, &z);
                let rhs = p.eval_w(t, &x).min(p.eval_w(t, &y));
                prop_assert!(lhs >= rhs * (1.0 - 1e-12));
            }
        }

        #[test]
        fn bernstein_reproduces_v(t in 0.0f64..3.0, r in 0.05f64..4.0) {
            for p in all_potentials().into_iter().filter(|p| p.completely_monotone()) {
                let m = p.bernstein(t).unwrap();
                let mut v: f64 = m.atoms.iter().map(|&(u, w)| w * (-u * u * r * r / 2.0).exp()).sum();
                v += m.continuous * (PI / 2.0).sqrt() / r;
                let want = p.eval_v_radial(t, r);
                prop_assert!((v - want).abs() <= 1e-12 * want);
            }
        }
    }
}
