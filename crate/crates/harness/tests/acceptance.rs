//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 9 train on California Housing for about 25 minutes and run
//! only with `DIFF2_ACCEPT_SLOW=1`; otherwise they print SKIP.
//! `DIFF2_ACCEPT_ONLY=1,4,8` restricts the run to the listed criteria;
//! `DIFF2_ACCEPT_SOFT=1` adds the non-gating ε = 5 directional check.

use std::ops::ControlFlow;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use diff2_core::accountant::{
    calibrate_diff2_bvrlsgd, calibrate_diff2_gd, local_step_base_rdp, select_alpha, subsample_amplified_rdp_exact,
    subsample_amplified_rdp_simple, verify_budget, BudgetSplit, MechanismSchedule, PrivacyBudget,
};
use diff2_core::data::{load_csv, CsvSchema, RawDataset};
use diff2_core::federation::Federation;
use diff2_core::framework::{
    aggregate_and_privatize, local_message, local_step_message, run_diff2, run_dp_gd, Diff2Config, Monitor,
    RoundMessage,
};
use diff2_core::model::{batch_mean_gradient, init_params, per_sample_gradient, per_sample_loss, ModelSpec, Sample};
use diff2_core::{ParamVector, RngStream};
use diff2_harness::experiment::{compare, prepare_seed, run_experiment, run_seed, Algo, AlgoResult, ExperimentConfig, PreparedSeed};
use diff2_harness::output::{curve_file_name, write_curve_csv};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.2}s of {limit_s}s"))
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_rel: f64 = 0.0;
    let mut worst_total: f64 = f64::NEG_INFINITY;
    let mut cases = 0;
    let mut ok = true;
    for eps in [1.0, 3.0, 5.0] {
        for delta in [1e-5, 1e-6] {
            let budget = PrivacyBudget::new(eps, delta).unwrap();
            let alpha = 1.0 + (2.0 * (1.0 / delta).ln() / eps).ceil();
            ok &= select_alpha(&budget) as f64 == alpha;
            for rounds in [10u64, 200, 2000] {
                for t in [1, 10, rounds] {
                    for n in [100u64, 1651] {
                        for p in [1u64, 10] {
                            for u in [1.1, 1.25, 2.0] {
                                let plan = calibrate_diff2_gd(&budget, rounds, t, n, p, BudgetSplit::Ratio(u)).unwrap();
                                let audit = verify_budget(&plan, &MechanismSchedule::from_plan(&plan)).unwrap();
                                // independent composition from the closed forms
                                let restarts = rounds.div_ceil(t) as f64;
                                let diffs = rounds as f64 - restarts;
                                let np2 = (n * n * p * p) as f64;
                                let u_eff = if diffs == 0.0 { 1.0 } else { u };
                                let s1 = 4.0 * u_eff * alpha * restarts / (np2 * eps);
                                let mut rdp = 2.0 * alpha * restarts / (np2 * s1);
                                if diffs > 0.0 {
                                    let s2 = 4.0 * u / (u - 1.0) * alpha * diffs / (np2 * eps);
                                    rdp += 2.0 * alpha * diffs / (np2 * s2);
                                    ok &= (plan.sigma2_sq.unwrap() - s2).abs() <= 1e-12 * s2;
                                }
                                ok &= (plan.sigma1_sq - s1).abs() <= 1e-12 * s1;
                                let rel = (audit.composed_rdp - eps / 2.0).abs() / (eps / 2.0);
                                ok &= (rdp - eps / 2.0).abs() <= 1e-9 * eps;
                                worst_rel = worst_rel.max(rel);
                                worst_total = worst_total.max(audit.eps_total - eps);
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let (fast, time) = within(start.elapsed(), 1.0);
    outcome(
        ok && worst_rel <= 1e-9 && worst_total <= 0.0 && fast,
        format!("{cases} plans; max |RDP − ε/2|/(ε/2) = {worst_rel:.2e}; max (ε_total − ε) = {worst_total:.4}; {time}"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn ln_choose(n: u32, k: u32) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

/// The binomial-sum bound with `ε(∞) = ∞`, summed directly.
fn exact_oracle(eps: &dyn Fn(u32) -> f64, gamma: f64, alpha: u32) -> f64 {
    let e2 = eps(2);
    let second = gamma * gamma * ln_choose(alpha, 2).exp() * (4.0 * e2.exp_m1()).min(2.0 * e2.exp());
    let mut excess = second;
    for j in 3..=alpha {
        excess += 2.0 * (j as f64 * gamma.ln() + ln_choose(alpha, j) + (j - 1) as f64 * eps(j)).exp();
    }
    excess.ln_1p() / (alpha - 1) as f64
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let mut ok = true;
    let mut max_oracle_gap: f64 = 0.0;
    let mut min_margin = f64::INFINITY;
    let gammas = [1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2];
    for gamma in gammas {
        for alpha in 2u32..=32 {
            for c in [0.5, 1.0, 2.0] {
                // Gaussian base mechanism ε(j) = 2j/(b²σ₃²); sweep σ₃² on a log grid
                for step in 0..40 {
                    let b = 10u64;
                    let sigma3_sq = 10f64.powf(-4.0 + 0.2 * step as f64);
                    let eps = local_step_base_rdp(b, sigma3_sq);
                    let (e2, ea) = (eps(2), eps(alpha));
                    let holds = ea <= 1.0 / 3.0 && ea <= (1.0 / (2.0 * gamma * alpha as f64)).ln() && gamma <= e2 / (c * alpha as f64);
                    if !holds {
                        continue;
                    }
                    let exact = subsample_amplified_rdp_exact(&eps, gamma, alpha, f64::INFINITY);
                    let oracle = exact_oracle(&eps, gamma, alpha);
                    let simple = subsample_amplified_rdp_simple(e2, ea, gamma, alpha, c);
                    max_oracle_gap = max_oracle_gap.max((exact - oracle).abs() / oracle.max(1e-300));
                    ok &= simple.conditions_hold && exact >= 0.0 && simple.value >= 0.0 && simple.value >= exact;
                    min_margin = min_margin.min(simple.value / exact.max(1e-300));
                    checked += 1;
                }
            }
        }
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    outcome(
        ok && checked > 1000 && max_oracle_gap < 1e-9 && fast,
        format!(
            "{checked} (γ, α, c, σ₃) points inside the conditions; min simple/exact = {min_margin:.3}; \
             exact vs direct sum rel gap {max_oracle_gap:.1e}; {time}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_sample(rng: &mut diff2_core::numerics::StreamRng, dim: usize, scale: f64) -> Sample {
    let x = (0..dim).map(|_| scale * rng.uniform_in(-1.0, 1.0)).collect();
    Sample::regression(x, scale * rng.uniform_in(-1.0, 1.0))
}

fn federation_of(shards: Vec<Vec<Sample>>) -> Federation {
    Federation::from_shards(shards).unwrap()
}

fn aggregate(msgs: &[RoundMessage], prev: Option<&ParamVector>) -> ParamVector {
    aggregate_and_privatize(msgs, prev, 0.0, &RngStream::new(0)).unwrap().v_tilde
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let spec = ModelSpec::regression(2, 3);
    let root = RngStream::new(3);
    let mut rng = root.derive("data", 0).rng();
    let mut worst: [f64; 3] = [0.0; 3];
    let mut substitutions = 0u64;
    for n_p in 2..=6usize {
        for p in [1usize, 2] {
            for trial in 0..4u64 {
                let shards: Vec<Vec<Sample>> =
                    (0..p).map(|_| (0..n_p).map(|_| random_sample(&mut rng, 2, 2.0)).collect()).collect();
                // replacement pool mixes ordinary and extreme records
                let pool: Vec<Sample> = (0..6).map(|k| random_sample(&mut rng, 2, if k % 2 == 0 { 1.0 } else { 25.0 })).collect();
                let fed = federation_of(shards.clone());
                let s = root.derive("params", (n_p * 10 + p) as u64 * 10 + trial);
                let x = init_params(&spec, &s.derive("x", 0), true);
                let y = init_params(&spec, &s.derive("y", 0), true);
                let (c1, c2) = (0.3 + rng.uniform(), 0.2 + 2.0 * rng.uniform());
                let prev = init_params(&spec, &s.derive("v", 0), false);
                for restart in [true, false] {
                    let msgs = |f: &Federation| -> Vec<RoundMessage> {
                        f.shards().iter().map(|sh| local_message(&spec, sh, &x, Some(&y), restart, c1, c2).unwrap()).collect()
                    };
                    let prev_v = if restart { None } else { Some(&prev) };
                    let base = aggregate(&msgs(&fed), prev_v);
                    let c = if restart { c1 } else { c2 * x.sub(&y).norm() };
                    let bound = 2.0 * c / (n_p * p) as f64;
                    for i in 0..n_p {
                        for z in &pool {
                            let mut alt = shards.clone();
                            alt[0][i] = z.clone();
                            let moved = aggregate(&msgs(&federation_of(alt)), prev_v).sub(&base).norm();
                            let k = if restart { 0 } else { 1 };
                            worst[k] = worst[k].max(moved / bound);
                            substitutions += 1;
                        }
                    }
                }
                // local step, conditioned on the minibatch
                let shard = &fed.shards()[0];
                let b = n_p.min(3);
                let idx: Vec<usize> = root.derive("batch", trial).rng().sample_without_replacement(n_p, b);
                let c3 = 0.1 + rng.uniform();
                let (base, radius) = local_step_message(&spec, shard, &idx, &x, &y, c3).unwrap();
                let bound = 2.0 * radius / b as f64;
                for &i in &idx {
                    for z in &pool {
                        let mut alt = shard.clone();
                        alt.samples[i] = z.clone();
                        let (m, _) = local_step_message(&spec, &alt, &idx, &x, &y, c3).unwrap();
                        worst[2] = worst[2].max(m.sub(&base).norm() / bound);
                        substitutions += 1;
                    }
                }
            }
        }
    }
    let slack = 1e-12;
    let ok = worst.iter().all(|&w| w <= 1.0 + slack);
    let (fast, time) = within(start.elapsed(), 10.0);
    outcome(
        ok && fast,
        format!(
            "{substitutions} substitutions; max ‖Δ‖/bound: restart {:.6}, difference {:.6}, local step {:.6}; {time}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn central_difference(spec: &ModelSpec, x: &ParamVector, z: &Sample, h: f64) -> ParamVector {
    let mut g = vec![0.0; x.len()];
    for (i, gi) in g.iter_mut().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[i] += h;
        minus[i] -= h;
        *gi = (per_sample_loss(spec, &plus, z).unwrap() - per_sample_loss(spec, &minus, z).unwrap()) / (2.0 * h);
    }
    ParamVector::from_vec(g)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let root = RngStream::new(4);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for classification in [false, true] {
        for i in 0..100u64 {
            let s = root.derive(if classification { "ce" } else { "sq" }, i);
            let mut rng = s.derive("shape", 0).rng();
            let input = 1 + rng.below(6) as usize;
            let hidden = 1 + rng.below(8) as usize;
            let features: Vec<f64> = (0..input).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let (spec, z) = if classification {
                let k = 2 + rng.below(4) as usize;
                let c = rng.below(k as u64) as usize;
                (ModelSpec::classification(input, hidden, k), Sample::classification(features, c))
            } else {
                (ModelSpec::regression(input, hidden), Sample::regression(features, rng.uniform_in(-1.0, 1.0)))
            };
            let x = init_params(&spec, &s.derive("x", 0), false);
            let g = per_sample_gradient(&spec, &x, &z).unwrap();
            let fd = central_difference(&spec, &x, &z, 1e-5);
            let rel = g.sub(&fd).norm() / fd.norm().max(1e-8);
            worst = worst.max(rel);
            count += 1;
        }
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    outcome(worst <= 1e-5 && fast, format!("{count} instances; max relative error {worst:.2e}; {time}"))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let start = Instant::now();
    // 3 inputs, 4 hidden units: d = 21
    let spec = ModelSpec::regression(3, 4);
    let d = spec.param_count() as f64;
    let root = RngStream::new(5);
    let mut rng = root.derive("data", 0).rng();
    let shards: Vec<Vec<Sample>> = (0..2).map(|_| (0..12).map(|_| random_sample(&mut rng, 3, 1.0)).collect()).collect();
    let fed = federation_of(shards);
    // frozen trajectory from noiseless GD
    let (rounds, t) = (8u64, 4u64);
    let mut traj = vec![init_params(&spec, &root.derive("x0", 0), false)];
    for _ in 0..rounds {
        let x = traj.last().unwrap();
        let g = full_gradient(&spec, &fed, x);
        traj.push(x.step(0.3, &g));
    }
    // clipping never binds at these radii
    let (c1, c2, sigma1, sigma2) = (1e3, 1e4, 2e-4, 3e-6);
    let messages: Vec<Vec<RoundMessage>> = (1..=rounds)
        .map(|r| {
            let restart = (r - 1) % t == 0;
            let prev = if r >= 2 { Some(&traj[(r - 2) as usize]) } else { None };
            fed.shards()
                .iter()
                .map(|sh| local_message(&spec, sh, &traj[(r - 1) as usize], prev, restart, c1, c2).unwrap())
                .collect()
        })
        .collect();
    let grads: Vec<ParamVector> = (1..=rounds).map(|r| full_gradient(&spec, &fed, &traj[(r - 1) as usize])).collect();
    let draws = 10_000u64;
    let mut sum = vec![0.0; rounds as usize];
    let mut sum_sq = vec![0.0; rounds as usize];
    for m in 0..draws {
        let mc = root.derive("mc", m);
        let mut v: Option<ParamVector> = None;
        for r in 1..=rounds {
            let restart = (r - 1) % t == 0;
            let sigma = if restart { sigma1 } else { sigma2 };
            let prev = if restart { None } else { v.as_ref() };
            let out = aggregate_and_privatize(&messages[(r - 1) as usize], prev, sigma, &mc.derive("round", r)).unwrap();
            let err = out.v_tilde.sub(&grads[(r - 1) as usize]).norm_sq();
            sum[(r - 1) as usize] += err;
            sum_sq[(r - 1) as usize] += err * err;
            v = Some(out.v_tilde);
        }
    }
    let mut worst_z: f64 = 0.0;
    let mut ok = true;
    let mut acc_c2 = 0.0;
    for r in 1..=rounds {
        let i = (r - 1) as usize;
        let restart = (r - 1) % t == 0;
        if restart {
            acc_c2 = 0.0;
        } else {
            let c2r = c2 * traj[i].sub(&traj[i - 1]).norm();
            acc_c2 += c2r * c2r;
        }
        let theory = sigma1 * sigma1 * c1 * c1 * d + sigma2 * sigma2 * d * acc_c2;
        let n = draws as f64;
        let mean = sum[i] / n;
        let var = (sum_sq[i] / n - mean * mean) * n / (n - 1.0);
        let se = (var / n).sqrt();
        let z = (mean - theory).abs() / se;
        worst_z = worst_z.max(z);
        ok &= z <= 3.0;
    }
    let (fast, time) = within(start.elapsed(), 30.0);
    outcome(ok && fast, format!("{draws} redraws over {rounds} rounds (T = {t}); max |mean − identity|/SE = {worst_z:.2}; {time}"))
}

fn full_gradient(spec: &ModelSpec, fed: &Federation, x: &ParamVector) -> ParamVector {
    let mut acc = ParamVector::zeros(x.len());
    for sh in fed.shards() {
        acc.add_assign(&batch_mean_gradient(spec, x, &sh.samples).unwrap());
    }
    acc.scaled(1.0 / fed.clients() as f64)
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let spec = ModelSpec::regression(3, 5);
    let root = RngStream::new(6);
    let mut rng = root.derive("data", 0).rng();
    let shards: Vec<Vec<Sample>> = (0..3).map(|_| (0..15).map(|_| random_sample(&mut rng, 3, 1.0)).collect()).collect();
    let fed = federation_of(shards);
    let x0 = init_params(&spec, &root.derive("x0", 0), false);
    let run = root.derive("run", 0);
    let go = |_: &_| ControlFlow::Continue(());

    let budget = PrivacyBudget::new(3.0, 1e-5).unwrap();
    let plan = calibrate_diff2_gd(&budget, 100, 1, fed.n_min() as u64, 3, BudgetSplit::RestartOnly).unwrap();
    let dp = run_dp_gd(100, 0.2, 0.5, plan.sigma1(), &fed, &spec, &x0, &run, Monitor::every_round(), go).unwrap();
    let cfg = Diff2Config::gd(100, 1, 0.2, 0.5, 7.0, plan.sigma1(), 123.0);
    let d2 = run_diff2(&cfg, &fed, &spec, &x0, &run, Monitor::every_round(), go).unwrap();
    let bitwise = dp.trajectory.len() == d2.trajectory.len()
        && dp
            .trajectory
            .iter()
            .zip(&d2.trajectory)
            .all(|(a, b)| a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()))
        && dp.records == d2.records;

    // σ = 0 with radii far above every gradient: compare against plain GD
    let cfg = Diff2Config::gd(200, 10, 0.2, 1e12, 1e12, 0.0, 0.0);
    let quiet = run_diff2(&cfg, &fed, &spec, &x0, &run, Monitor::every_round(), go).unwrap();
    let mut x = x0.clone();
    let mut worst: f64 = 0.0;
    for r in 1..=200usize {
        x = x.step(0.2, &full_gradient(&spec, &fed, &x));
        let dev = x.iter().zip(quiet.trajectory[r].iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    outcome(
        bitwise && worst <= 1e-10 && fast,
        format!("(a) T=1 bit-identical to DP-GD: {bitwise}; (b) max |x − x_GD| over 200 rounds = {worst:.2e}; {time}"),
    )
}

// ---------------------------------------------------------------- criteria 7 and 9

fn california() -> RawDataset {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/california_housing.csv");
    load_csv(&path, &CsvSchema::regression("MedHouseVal")).expect("California Housing CSV")
}

type Directional = (ExperimentConfig, Vec<PreparedSeed>, AlgoResult, AlgoResult);

fn directional(eps: f64, raw: &RawDataset) -> (Outcome, Option<Directional>) {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(Algo::DpGd, eps, 1e-5, 2000, 10);
    cfg.algos = vec![Algo::DpGd, Algo::Diff2Gd];
    cfg.dataset = Some("data/california_housing.csv".into());
    let prepared: Vec<PreparedSeed> = (1..=5).map(|s| prepare_seed(raw, &cfg, s).unwrap()).collect();
    let dp = run_experiment(&cfg, Algo::DpGd, &prepared).unwrap();
    let d2 = run_experiment(&cfg, Algo::Diff2Gd, &prepared).unwrap();
    let cmp = compare(&dp, &d2);
    let train = cmp.iter().find(|c| c.criterion == "train_loss").unwrap();
    let failures = dp.failures.len() + d2.failures.len();
    let p = train.test.map(|t| t.p_value);
    let passed = failures == 0 && p.is_some_and(|p| p < 0.05) && train.diffs.iter().sum::<f64>() < 0.0;
    let mut detail = format!(
        "ε = {eps}: min train loss DP-GD {:.6} ± {:.6}, DIFF2-GD {:.6} ± {:.6}; diffs {:?}; p = {}",
        dp.min_train_loss.mean,
        dp.min_train_loss.std,
        d2.min_train_loss.mean,
        d2.min_train_loss.std,
        train.diffs.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>(),
        p.map_or("n/a".to_string(), |p| format!("{p:.3e}")),
    );
    for c in &cmp {
        if c.criterion != "train_loss" {
            if let Some(t) = c.test {
                detail += &format!("; {} p = {:.3e}", c.criterion, t.p_value);
            }
        }
    }
    let winners = |r: &AlgoResult| {
        r.seeds
            .iter()
            .map(|o| {
                let h = &o.train.hyper;
                format!("η={} c1={:?} c2={:?} T={:?}", h.eta, h.c1, h.c2, h.restart_interval)
            })
            .collect::<Vec<_>>()
            .join("; ")
    };
    detail += &format!("; DP-GD winners [{}]; DIFF2-GD winners [{}]", winners(&dp), winners(&d2));
    if failures > 0 {
        detail += &format!("; seed failures {:?} {:?}", dp.failures, d2.failures);
    }
    detail += &format!("; {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    (outcome(passed, detail), Some((cfg, prepared, dp, d2)))
}

fn write_seed_curves(dir: &Path, algo: Algo, o: &diff2_harness::experiment::SeedOutcome) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for (criterion, recs) in [("train_loss", &o.train.records), ("train_sq_grad_norm", &o.grad.records)] {
        let path = dir.join(curve_file_name(algo.name(), o.seed, criterion));
        write_curve_csv(&path, recs).unwrap();
        files.push(path);
    }
    files
}

fn criterion_9(cfg: &ExperimentConfig, prepared: &[PreparedSeed], first: &[(&AlgoResult, Algo)], raw: &RawDataset) -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fresh = prepare_seed(raw, cfg, 1).unwrap();
    let mut compared = 0;
    let mut identical = true;
    let mut bytes = 0;
    for &(result, algo) in first {
        let Some(o1) = result.seeds.iter().find(|s| s.seed == 1) else {
            return outcome(false, format!("{algo} seed 1 failed in the first run"));
        };
        let o2 = run_seed(cfg, algo, &fresh).unwrap();
        let f1 = write_seed_curves(a.path(), algo, o1);
        let f2 = write_seed_curves(b.path(), algo, &o2);
        for (p1, p2) in f1.iter().zip(&f2) {
            let (x, y) = (std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
            identical &= x == y;
            bytes += x.len();
            compared += 1;
        }
    }
    let same_prep = prepared[0].x0 == fresh.x0 && prepared[0].federation == fresh.federation;
    outcome(
        identical && same_prep && compared == 4,
        format!("{compared} curve CSVs ({bytes} bytes) from an independent rerun of seed 1: byte-identical = {identical}"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let budget = PrivacyBudget::new(3.0, 1e-5).unwrap();
    let (r, t, k, p, n) = (400u64, 20u64, 10u64, 10u64, 1651u64);
    let plan = calibrate_diff2_bvrlsgd(&budget, r, t, k, p, n, 40, 3.0, 3.0).unwrap();
    let alpha = plan.alpha;
    let s3 = plan.sigma3_sq.unwrap();
    // exact-sum audit recomputed here: 2K⌈R/P⌉ε'(α) ≤ ε/3
    let audit = |b: u64, s3: f64| {
        let eps = local_step_base_rdp(b, s3);
        2.0 * k as f64 * r.div_ceil(p) as f64 * exact_oracle(&eps, b as f64 / n as f64, alpha)
    };
    let lhs = audit(40, s3);
    let rhs = budget.eps / 3.0;
    let bound = n as f64 / (2.0 * std::f64::consts::E * alpha as f64);
    let b_big = 2 * bound.ceil() as u64;
    let perturbed = calibrate_diff2_bvrlsgd(&budget, r, t, k, p, n, b_big, 3.0, 3.0).unwrap();
    let lhs_big = audit(b_big, perturbed.sigma3_sq.unwrap());
    let (fast, time) = within(start.elapsed(), 1.0);
    outcome(
        plan.feasible && lhs <= rhs && !perturbed.feasible && lhs_big > rhs && fast,
        format!(
            "α = {alpha}, σ₃² = {s3:.4}; b = 40: feasible = {}, audit {lhs:.4} ≤ {rhs:.4}; \
             n_min/(2eα) = {bound:.2}; b = {b_big}: feasible = {}, audit {lhs_big:.4}; {time}",
            plan.feasible, perturbed.feasible
        ),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("DIFF2_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));
    let mut all_pass = true;
    let mut report = |n: u32, o: Outcome| {
        all_pass &= o.passed;
        println!("criterion {n}: {} | {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    };
    let quick: [(u32, fn() -> Outcome); 6] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5), (6, criterion_6)];
    for (n, f) in quick {
        if wanted(n) {
            report(n, f());
        }
    }
    if wanted(8) {
        report(8, criterion_8());
    }
    let slow = std::env::var("DIFF2_ACCEPT_SLOW").is_ok_and(|v| v == "1");
    if !slow {
        for n in [7, 9] {
            if wanted(n) {
                println!("criterion {n}: SKIP | set DIFF2_ACCEPT_SLOW=1 to run the California Housing experiment");
            }
        }
    }
    if slow && (wanted(7) || wanted(9)) {
        let raw = california();
        let (o7, state) = directional(3.0, &raw);
        if wanted(7) {
            report(7, o7);
        }
        if wanted(9) {
            let (cfg, prepared, dp, d2) = state.unwrap();
            report(9, criterion_9(&cfg, &prepared, &[(&dp, Algo::DpGd), (&d2, Algo::Diff2Gd)], &raw));
        }
        if std::env::var("DIFF2_ACCEPT_SOFT").is_ok_and(|v| v == "1") {
            let (soft, _) = directional(5.0, &raw);
            println!("soft (ε = 5, non-gating): {} | {}", if soft.passed { "PASS" } else { "FAIL" }, soft.detail);
        }
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
