//! Browser bindings: three small operations returning JSON text.

use polaron_core::cluster::sample_busy_cycle;
use polaron_core::exec::Sequential;
use polaron_core::potentials::Potential;
use polaron_core::renewal::dormancy_probability_curve;
use polaron_core::rng::SeedStreams;
use polaron_core::tilting::{solve_lambda, CyclePool, PoolOptions, SolveOptions, TiltOptions, TiltedLaw};
use serde_json::json;
use std::collections::BTreeMap;
use wasm_bindgen::prelude::*;

const DEMO: u32 = 100;

fn potential(name: &str, params_json: &str) -> Result<Potential, String> {
    let params: BTreeMap<String, f64> = if params_json.trim().is_empty() {
        BTreeMap::new()
    } else {
        serde_json::from_str(params_json).map_err(|e| format!("parameters: {e}"))?
    };
    Potential::from_key(name, |k| params.get(k).copied()).map_err(|e| e.to_string())
}

/// `P(dormant at t)` from an empty queue: closed form, renewal solve and simulation.
pub fn dormancy_json(alpha: f64, beta: f64, t_max: f64, points: usize, paths: usize, seed: u64) -> Result<String, String> {
    if !(t_max > 0.0) || points < 2 || paths < 1 {
        return Err("need t_max > 0, points ≥ 2 and paths ≥ 1".into());
    }
    let t: Vec<f64> = (0..points).map(|i| t_max * i as f64 / (points - 1) as f64).collect();
    let mut rng = SeedStreams::new(seed).stream(DEMO, 0);
    let c = dormancy_probability_curve(alpha, beta, &t, paths, &mut rng).map_err(|e| e.to_string())?;
    serde_json::to_string(&c).map_err(|e| e.to_string())
}

/// One busy cycle: dormant length and the customer intervals.
pub fn cycle_json(alpha: f64, beta: f64, seed: u64) -> Result<String, String> {
    let mut rng = SeedStreams::new(seed).stream(DEMO, 1);
    let c = sample_busy_cycle(&mut rng, alpha, beta).map_err(|e| e.to_string())?;
    let iv: Vec<[f64; 2]> = c.cluster.intervals().iter().map(|i| [i.start, i.end]).collect();
    Ok(json!({ "dormant": c.dormant, "active": c.cluster.active_length(), "intervals": iv }).to_string())
}

/// `Λ̂(λ)` on a frozen pool for `λ` from just above `−α` to `α + 3`, and the root if the pool has one.
pub fn tilt_json(name: &str, params_json: &str, alpha: f64, n_pool: usize, n_inner: usize, seed: u64) -> Result<String, String> {
    let pot = potential(name, params_json)?;
    let streams = SeedStreams::new(seed);
    let pool = CyclePool::build(alpha, &pot, PoolOptions { n_pool, n_inner }, &streams, &Sequential).map_err(|e| e.to_string())?;
    let lo = -alpha + 0.02 * alpha;
    let curve: Vec<[f64; 2]> = (0..=60)
        .map(|i| lo + (alpha + 3.0 - lo) * i as f64 / 60.0)
        .filter_map(|l| pool.big_lambda(l).ok().map(|e| [l, e.value]))
        .collect();
    let opts = TiltOptions { pool: PoolOptions { n_pool, n_inner }, solve: SolveOptions { bootstrap: 0, ..Default::default() }, ..Default::default() };
    let solved = solve_lambda(&pool, opts.solve, &streams).and_then(|s| TiltedLaw::at_lambda(pool, s.lambda_star, opts));
    let result = match solved {
        Ok(law) => json!({
            "status": "ok",
            "lambda_star": law.lambda_star(),
            "psi": law.psi(),
            "ess": law.ess(),
            "mean_total": law.mean_total().value,
        }),
        Err(e) => json!({ "status": "refused", "reason": e.to_string() }),
    };
    Ok(json!({ "potential": pot.key(), "alpha": alpha, "curve": curve, "tilt": result }).to_string())
}

#[wasm_bindgen]
pub fn dormancy_curve(alpha: f64, beta: f64, t_max: f64, points: usize, paths: usize, seed: u64) -> Result<String, JsError> {
    dormancy_json(alpha, beta, t_max, points, paths, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn busy_cycle(alpha: f64, beta: f64, seed: u64) -> Result<String, JsError> {
    cycle_json(alpha, beta, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tilt(name: &str, params_json: &str, alpha: f64, n_pool: usize, n_inner: usize, seed: u64) -> Result<String, JsError> {
    tilt_json(name, params_json, alpha, n_pool, n_inner, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dormancy_curve_starts_at_one() {
        let v: serde_json::Value = serde_json::from_str(&dormancy_json(1.0, 1.0, 5.0, 51, 200, 1).unwrap()).unwrap();
        assert_eq!(v["closed_form"][0], 1.0);
        assert_eq!(v["t"].as_array().unwrap().len(), 51);
        assert!(dormancy_json(1.0, 1.0, 0.0, 51, 200, 1).is_err());
    }

    #[test]
    fn cycle_intervals_are_connected() {
        let v: serde_json::Value = serde_json::from_str(&cycle_json(2.0, 1.0, 3).unwrap()).unwrap();
        let iv = v["intervals"].as_array().unwrap();
        assert_eq!(iv[0][0], 0.0);
        assert!(v["dormant"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn trivial_tilt_has_zero_root() {
        let v: serde_json::Value = serde_json::from_str(&tilt_json("trivial", "", 0.5, 500, 1, 4).unwrap()).unwrap();
        assert_eq!(v["tilt"]["status"], "ok");
        assert!(v["tilt"]["lambda_star"].as_f64().unwrap().abs() < 1e-6);
        assert!(tilt_json("bounded_exp", "{\"c\": 1}", 0.5, 100, 1, 4).is_err());
    }
}
