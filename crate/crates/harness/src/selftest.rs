//! Quick invariant suites behind `diff2 selftest`.

use diff2_core::accountant::{
    calibrate_diff2_gd, subsample_amplified_rdp_exact, subsample_amplified_rdp_simple, verify_budget, BudgetSplit,
    MechanismSchedule, PrivacyBudget,
};
use diff2_core::framework::{local_message, run_diff2, run_dp_gd, Diff2Config, Monitor};
use diff2_core::model::{finite_diff_gradient, init_params, per_sample_gradient, ModelSpec, Sample};
use diff2_core::federation::Federation;
use diff2_core::{ParamVector, RngStream};
use std::ops::ControlFlow;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn budget_algebra() -> Check {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for eps in [1.0, 3.0, 5.0] {
        let b = PrivacyBudget::new(eps, 1e-5).unwrap();
        for (r, t) in [(10, 1), (200, 10), (2000, 2000)] {
            let plan = calibrate_diff2_gd(&b, r, t, 1651, 10, BudgetSplit::Ratio(1.25)).unwrap();
            let audit = verify_budget(&plan, &MechanismSchedule::from_plan(&plan)).unwrap();
            worst = worst.max((audit.composed_rdp - eps / 2.0).abs() / (eps / 2.0));
            ok &= audit.within(&b);
        }
    }
    check("budget algebra", ok && worst < 1e-9, format!("max relative gap {worst:.2e}"))
}

fn subsampling_dominance() -> Check {
    let mut ok = true;
    let mut n = 0;
    for gamma in [1e-4, 1e-3, 1e-2] {
        for alpha in [2u32, 8, 32] {
            for sigma_sq in [1e1, 1e2, 1e3, 1e4] {
                let eps = move |j: u32| j as f64 / sigma_sq;
                let simple = subsample_amplified_rdp_simple(eps(2), eps(alpha), gamma, alpha, 0.5);
                if !simple.conditions_hold {
                    continue;
                }
                let exact = subsample_amplified_rdp_exact(eps, gamma, alpha, f64::INFINITY);
                ok &= exact >= 0.0 && simple.value >= exact;
                n += 1;
            }
        }
    }
    check("subsampling dominance", ok && n > 0, format!("{n} grid points inside the conditions"))
}

fn toy_federation(n: usize, p: usize, seed: u64) -> (ModelSpec, Federation) {
    let spec = ModelSpec::regression(3, 4);
    let mut rng = RngStream::new(seed).rng();
    let shards = (0..p)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                    let y = x[0] - x[1] * x[2];
                    Sample::regression(x, y)
                })
                .collect()
        })
        .collect();
    (spec, Federation::from_shards(shards).unwrap())
}

fn sensitivity() -> Check {
    let (spec, fed) = toy_federation(4, 1, 3);
    let shard = fed.shard(1);
    let init = RngStream::new(9);
    let x = init_params(&spec, &init.derive("a", 0), false);
    let y = init_params(&spec, &init.derive("b", 0), false);
    let (c1, c2) = (0.5, 2.0);
    let mut worst: f64 = 0.0;
    for restart in [true, false] {
        let base = local_message(&spec, shard, &x, Some(&y), restart, c1, c2).unwrap().vector;
        let radius = if restart { c1 } else { c2 * x.sub(&y).norm() };
        for i in 0..shard.len() {
            let mut other = shard.clone();
            other.samples[i] = Sample::regression(vec![5.0, -5.0, 5.0], 40.0);
            let m = local_message(&spec, &other, &x, Some(&y), restart, c1, c2).unwrap().vector;
            worst = worst.max(m.sub(&base).norm() / (2.0 * radius / shard.len() as f64));
        }
    }
    check("sensitivity", worst <= 1.0 + 1e-12, format!("max ratio to bound {worst:.6}"))
}

fn gradients() -> Check {
    let spec = ModelSpec::classification(3, 4, 3);
    let x = init_params(&spec, &RngStream::new(5), false);
    let z = Sample::classification(vec![0.3, -0.2, 0.9], 2);
    let g = per_sample_gradient(&spec, &x, &z).unwrap();
    let fd = finite_diff_gradient(&spec, &x, &z, 1e-6).unwrap();
    let rel = g.sub(&fd).norm() / g.norm().max(1e-12);
    check("gradient", rel <= 1e-5, format!("relative error {rel:.2e}"))
}

fn reductions() -> Check {
    let (spec, fed) = toy_federation(6, 2, 11);
    let x0 = init_params(&spec, &RngStream::new(1), false);
    let run = RngStream::new(2);
    let go = |_: &_| ControlFlow::Continue(());
    let dp = run_dp_gd(20, 0.1, 0.7, 0.3, &fed, &spec, &x0, &run, Monitor::every_round(), go).unwrap();
    let cfg = Diff2Config::gd(20, 1, 0.1, 0.7, 1.0, 0.3, 0.0);
    let d2 = run_diff2(&cfg, &fed, &spec, &x0, &run, Monitor::every_round(), go).unwrap();
    let same = dp.trajectory == d2.trajectory;
    let last: &ParamVector = dp.trajectory.last().unwrap();
    check("T=1 reduction", same && last.is_finite(), format!("bit-identical: {same}"))
}

/// Run every suite.
pub fn run_all() -> Vec<Check> {
    vec![budget_algebra(), subsampling_dominance(), sensitivity(), gradients(), reductions()]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_pass() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
