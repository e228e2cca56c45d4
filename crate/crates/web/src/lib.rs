//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Every export returns a JSON string; the plain `*_json` functions hold the
//! logic so they can be tested natively.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ops::ControlFlow;

use diff2_core::accountant::{
    calibrate_diff2_bvrlsgd, calibrate_diff2_gd, local_step_base_rdp, subsample_amplified_rdp_exact,
    subsample_amplified_rdp_simple, verify_budget, BudgetSplit, MechanismSchedule, NoisePlan, PrivacyBudget,
};
use diff2_core::federation::Federation;
use diff2_core::framework::{run_diff2, run_dp_gd, Diff2Config, Monitor, RunOutput};
use diff2_core::model::{init_params, ModelSpec, Sample};
use diff2_core::RngStream;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn plan_json(plan: &NoisePlan) -> Result<serde_json::Value, String> {
    let audit = verify_budget(plan, &MechanismSchedule::from_plan(plan)).map_err(|e| e.to_string())?;
    Ok(json!({
        "plan": plan,
        "audit": audit,
        "within_budget": audit.within(&plan.budget),
    }))
}

/// DP-GD and DIFF2-GD noise plans side by side.
pub fn calibrate_json(eps: f64, delta: f64, rounds: u64, restart_interval: u64, n_min: u64, clients: u64, u: f64) -> Result<String, String> {
    let budget = PrivacyBudget::new(eps, delta).map_err(|e| e.to_string())?;
    let dp = calibrate_diff2_gd(&budget, rounds, 1, n_min, clients, BudgetSplit::RestartOnly).map_err(|e| e.to_string())?;
    let d2 = calibrate_diff2_gd(&budget, rounds, restart_interval, n_min, clients, BudgetSplit::Ratio(u))
        .map_err(|e| e.to_string())?;
    Ok(json!({ "dp_gd": plan_json(&dp)?, "diff2_gd": plan_json(&d2)? }).to_string())
}

/// DIFF2-BVR-L-SGD noise plan with its feasibility verdict.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_bvr_json(
    eps: f64,
    delta: f64,
    rounds: u64,
    restart_interval: u64,
    local_steps: u64,
    clients: u64,
    n_min: u64,
    batch: u64,
    u1: f64,
    u2: f64,
) -> Result<String, String> {
    let budget = PrivacyBudget::new(eps, delta).map_err(|e| e.to_string())?;
    let plan = calibrate_diff2_bvrlsgd(&budget, rounds, restart_interval, local_steps, clients, n_min, batch, u1, u2)
        .map_err(|e| e.to_string())?;
    Ok(plan_json(&plan)?.to_string())
}

#[derive(Serialize)]
struct BoundPoint {
    alpha: u32,
    exact: f64,
    simple: f64,
    conditions_hold: bool,
}

/// Subsampled RDP of one local step for orders `2..=max_alpha`, exact and simple.
pub fn subsampling_curve_json(batch: u64, n: u64, sigma3_sq: f64, max_alpha: u32) -> Result<String, String> {
    if batch == 0 || batch > n {
        return Err("batch must be in 1..=n".into());
    }
    if !(sigma3_sq > 0.0) {
        return Err("sigma3² must be positive".into());
    }
    let gamma = batch as f64 / n as f64;
    let eps = local_step_base_rdp(batch, sigma3_sq);
    let points: Vec<BoundPoint> = (2..=max_alpha.clamp(2, 256))
        .map(|alpha| {
            let simple = subsample_amplified_rdp_simple(eps(2), eps(alpha), gamma, alpha, 2.0);
            BoundPoint {
                alpha,
                exact: subsample_amplified_rdp_exact(&eps, gamma, alpha, f64::INFINITY),
                simple: simple.value,
                conditions_hold: simple.conditions_hold,
            }
        })
        .collect();
    Ok(json!({ "gamma": gamma, "points": points }).to_string())
}

fn synthetic_federation(clients: usize, per_client: usize, seed: u64) -> (ModelSpec, Federation) {
    let spec = ModelSpec::regression(4, 10);
    let stream = RngStream::new(seed).derive("data", 0);
    let mut rng = stream.rng();
    let shards = (0..clients)
        .map(|_| {
            (0..per_client)
                .map(|_| {
                    let x: Vec<f64> = (0..4).map(|_| rng.standard_normal()).collect();
                    let y = (0.6 * x[0] - 0.4 * x[1] + 0.3 * x[2] * x[3]).tanh() + 0.05 * rng.standard_normal();
                    Sample::regression(x, y)
                })
                .collect()
        })
        .collect();
    (spec, Federation::from_shards(shards).expect("non-empty shards"))
}

fn losses(out: &RunOutput) -> Vec<f64> {
    out.records.iter().map(|r| r.train_loss).collect()
}

/// Train DP-GD and DIFF2-GD on the same synthetic federation at the same budget.
#[allow(clippy::too_many_arguments)]
pub fn compare_json(eps: f64, rounds: u64, restart_interval: u64, eta: f64, c1: f64, c2: f64, seed: u64) -> Result<String, String> {
    let (clients, per_client) = (4, 250);
    let (spec, fed) = synthetic_federation(clients, per_client, seed);
    let budget = PrivacyBudget::new(eps, 1e-5).map_err(|e| e.to_string())?;
    let n = fed.n_min() as u64;
    let p = clients as u64;
    let dp = calibrate_diff2_gd(&budget, rounds, 1, n, p, BudgetSplit::RestartOnly).map_err(|e| e.to_string())?;
    let d2 = calibrate_diff2_gd(&budget, rounds, restart_interval, n, p, BudgetSplit::Ratio(1.25)).map_err(|e| e.to_string())?;
    let root = RngStream::new(seed);
    let x0 = init_params(&spec, &root.derive("init", 0), false);
    let run = root.derive("run", 0);
    let go = |_: &_| ControlFlow::Continue(());
    let a = run_dp_gd(rounds, eta, c1, dp.sigma1(), &fed, &spec, &x0, &run, Monitor::every_round(), go).map_err(|e| e.to_string())?;
    let cfg = Diff2Config::gd(rounds, restart_interval, eta, c1, c2, d2.sigma1(), d2.sigma2());
    let b = run_diff2(&cfg, &fed, &spec, &x0, &run, Monitor::every_round(), go).map_err(|e| e.to_string())?;
    let gd = run_dp_gd(rounds, eta, f64::INFINITY, 0.0, &fed, &spec, &x0, &run, Monitor::every_round(), go)
        .map_err(|e| e.to_string())?;
    Ok(json!({
        "gd": losses(&gd),
        "dp_gd": losses(&a),
        "diff2_gd": losses(&b),
        "sigma": { "dp_gd": dp.sigma1(), "diff2_restart": d2.sigma1(), "diff2_difference": d2.sigma2() },
    })
    .to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn calibrate(eps: f64, delta: f64, rounds: u32, restart_interval: u32, n_min: u32, clients: u32, u: f64) -> Result<String, JsError> {
    js(calibrate_json(eps, delta, rounds.into(), restart_interval.into(), n_min.into(), clients.into(), u))
}

#[wasm_bindgen(js_name = calibrateBvr)]
#[allow(clippy::too_many_arguments)]
pub fn calibrate_bvr(
    eps: f64,
    delta: f64,
    rounds: u32,
    restart_interval: u32,
    local_steps: u32,
    clients: u32,
    n_min: u32,
    batch: u32,
    u1: f64,
    u2: f64,
) -> Result<String, JsError> {
    js(calibrate_bvr_json(
        eps,
        delta,
        rounds.into(),
        restart_interval.into(),
        local_steps.into(),
        clients.into(),
        n_min.into(),
        batch.into(),
        u1,
        u2,
    ))
}

#[wasm_bindgen(js_name = subsamplingCurve)]
pub fn subsampling_curve(batch: u32, n: u32, sigma3_sq: f64, max_alpha: u32) -> Result<String, JsError> {
    js(subsampling_curve_json(batch.into(), n.into(), sigma3_sq, max_alpha))
}

#[wasm_bindgen]
pub fn compare(eps: f64, rounds: u32, restart_interval: u32, eta: f64, c1: f64, c2: f64, seed: u32) -> Result<String, JsError> {
    js(compare_json(eps, rounds.into(), restart_interval.into(), eta, c1, c2, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrate_reports_both_plans_within_budget() {
        let v: serde_json::Value = serde_json::from_str(&calibrate_json(3.0, 1e-5, 2000, 20, 1651, 10, 1.25).unwrap()).unwrap();
        assert_eq!(v["dp_gd"]["within_budget"], true);
        assert_eq!(v["diff2_gd"]["within_budget"], true);
        let s_dp = v["dp_gd"]["plan"]["sigma1_sq"].as_f64().unwrap();
        let s_d2 = v["diff2_gd"]["plan"]["sigma1_sq"].as_f64().unwrap();
        // restart noise shrinks with the number of restarts: ratio 2000/(1.25·100)
        assert!((s_dp / s_d2 - 16.0).abs() < 1e-9);
        assert!(calibrate_json(-1.0, 1e-5, 10, 1, 10, 1, 1.25).is_err());
    }

    #[test]
    fn bvr_plan_feasibility_is_reported() {
        let v: serde_json::Value =
            serde_json::from_str(&calibrate_bvr_json(3.0, 1e-5, 400, 20, 10, 10, 1651, 40, 3.0, 3.0).unwrap()).unwrap();
        assert_eq!(v["plan"]["feasible"], true);
    }

    #[test]
    fn curve_exact_never_exceeds_simple_when_conditions_hold() {
        let v: serde_json::Value = serde_json::from_str(&subsampling_curve_json(40, 1651, 1.0, 32).unwrap()).unwrap();
        let pts = v["points"].as_array().unwrap();
        assert_eq!(pts.len(), 31);
        for p in pts {
            let (e, s) = (p["exact"].as_f64().unwrap(), p["simple"].as_f64().unwrap());
            assert!(e >= 0.0);
            if p["conditions_hold"] == true {
                assert!(s >= e, "{p}");
            }
        }
        assert!(subsampling_curve_json(0, 10, 1.0, 4).is_err());
    }

    #[test]
    fn compare_returns_aligned_curves() {
        let raw = compare_json(3.0, 60, 10, 0.1, 1.0, 3.0, 7).unwrap();
        let v: serde_json::Value = serde_json::from_str(&raw).unwrap();
        for k in ["gd", "dp_gd", "diff2_gd"] {
            assert_eq!(v[k].as_array().unwrap().len(), 60, "{k}");
        }
        assert_eq!(compare_json(3.0, 60, 10, 0.1, 1.0, 3.0, 7).unwrap(), raw);
    }
}
