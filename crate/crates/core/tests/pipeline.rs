use std::ops::ControlFlow;

use diff2_core::accountant::{calibrate_diff2_gd, BudgetSplit, PrivacyBudget};
use diff2_core::data::{load_csv, prepare, CsvSchema};
use diff2_core::federation::partition_iid;
use diff2_core::framework::{run_diff2, run_dp_gd, Diff2Config, Monitor, RunStatus};
use diff2_core::model::{init_params, ModelSpec};
use diff2_core::RngStream;

#[test]
fn csv_to_private_training_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut text = String::from("x1,x2,target\n");
    for i in 0..1000 {
        let (a, b) = ((i as f64 * 0.21).sin() * 4.0, (i % 13) as f64);
        text += &format!("{a},{b},{}\n", 0.3 * a + 0.1 * b);
    }
    std::fs::write(&path, text).unwrap();

    let raw = load_csv(&path, &CsvSchema::regression("target")).unwrap();
    let root = RngStream::new(11);
    let (train, test, _) = prepare(&raw, 0.8, &root.derive("split", 0)).unwrap();
    assert_eq!((train.len(), test.len()), (800, 200));
    let fed = partition_iid(&train.samples(), 4, &root.derive("partition", 0)).unwrap();
    let spec = ModelSpec::regression(2, 5);
    let x0 = init_params(&spec, &root.derive("init", 0), false);
    let test = test.samples();
    let monitor = Monitor { stride: 1, test: Some(&test) };

    let budget = PrivacyBudget::new(3.0, 1e-5).unwrap();
    let n = fed.n_min() as u64;
    let plan = calibrate_diff2_gd(&budget, 100, 10, n, 4, BudgetSplit::Ratio(1.25)).unwrap();
    let cfg = Diff2Config::gd(100, 10, 0.2, 1.0, 1.0, plan.sigma1(), plan.sigma2());
    let go = |_: &_| ControlFlow::Continue(());
    let out = run_diff2(&cfg, &fed, &spec, &x0, &root.derive("run", 0), monitor, go).unwrap();
    assert_eq!(out.status, RunStatus::Completed);
    assert_eq!(out.records.len(), 100);
    assert!(out.records.iter().all(|r| r.test_loss.is_some_and(f64::is_finite)));
    let r_hat = out.r_hat.unwrap();
    assert!((1..=100).contains(&r_hat));
    assert_eq!(out.x_out.as_ref(), Some(&out.outputs[(r_hat - 1) as usize]));
    let first = out.records[0].train_loss;
    assert!(out.records.iter().all(|r| r.train_loss.is_finite()));
    assert!(out.records.iter().any(|r| r.train_loss < first));

    // an observer can stop a run; it then has no output draw
    let stop = |r: &diff2_core::framework::RoundRecord| if r.round == 5 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) };
    let dp = run_dp_gd(100, 0.5, 1.0, 0.01, &fed, &spec, &x0, &root.derive("run", 0), monitor, stop).unwrap();
    assert_eq!(dp.status, RunStatus::Stopped(5));
    assert!(dp.r_hat.is_none());
}
