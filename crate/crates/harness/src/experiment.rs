//! Per-seed data preparation, noise calibration, tuning and summaries.

use std::fmt;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::str::FromStr;

use diff2_core::accountant::{
    calibrate_diff2_bvrlsgd, calibrate_diff2_gd, verify_budget, AccountantError, BudgetAudit, BudgetSplit,
    MechanismSchedule, NoisePlan, PrivacyBudget,
};
use diff2_core::data::{prepare, DataError, NormalizationStats, RawDataset, TaskKind};
use diff2_core::federation::{partition_iid, Federation, FederationError};
use diff2_core::framework::{run_diff2, run_dp_gd, Diff2Config, FrameworkError, Monitor, RoundRecord, Routine, RunOutput, RunStatus};
use diff2_core::model::{init_params, ModelSpec, Sample};
use diff2_core::{ParamVector, RngStream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{paired_one_sided_t_test, StatsError, TTest};
use crate::tuning::{tune, Attempt, GridPoint, Trial, TuningError, TuningGrid};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Framework(#[from] FrameworkError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("noise plan is not feasible: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run stopped before completion: {0:?}")]
    Incomplete(RunStatus),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Gd,
    DpGd,
    Diff2Gd,
    Diff2BvrLsgd,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Gd, Algo::DpGd, Algo::Diff2Gd, Algo::Diff2BvrLsgd];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Gd => "gd",
            Algo::DpGd => "dp-gd",
            Algo::Diff2Gd => "diff2-gd",
            Algo::Diff2BvrLsgd => "diff2-bvr-lsgd",
        }
    }

    fn tuned(self) -> (bool, bool, bool) {
        match self {
            Algo::Gd => (false, false, false),
            Algo::DpGd => (true, false, false),
            Algo::Diff2Gd | Algo::Diff2BvrLsgd => (true, true, true),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm '{s}' (expected gd, dp-gd, diff2-gd or diff2-bvr-lsgd)"))
    }
}

/// Hyperparameters of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub eta: f64,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    /// Defaults to `c2` when absent.
    pub c3: Option<f64>,
    pub restart_interval: Option<u64>,
}

impl Hyper {
    fn from_point(point: &GridPoint, eta: f64) -> Self {
        Self {
            eta,
            c1: point.c1,
            c2: point.c2,
            c3: None,
            restart_interval: point.restart_interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperSource {
    Tune { fast: bool },
    Fixed(Hyper),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub task: TaskKind,
    /// The first entry is the baseline for paired comparisons.
    pub algos: Vec<Algo>,
    pub eps: f64,
    pub delta: f64,
    pub rounds: u64,
    pub clients: usize,
    pub seeds: u64,
    pub root_seed: u64,
    pub hyper: HyperSource,
    pub local_steps: usize,
    pub batch: usize,
    /// Budget split for DIFF2-GD.
    pub u: f64,
    pub u1: f64,
    pub u2: f64,
    pub hidden_units: usize,
    pub literal_init: bool,
    /// Train-loss check stride for the patience rule.
    pub check_every: u64,
    pub train_fraction: f64,
}

impl ExperimentConfig {
    pub fn new(algo: Algo, eps: f64, delta: f64, rounds: u64, clients: usize) -> Self {
        Self {
            dataset: None,
            task: TaskKind::Regression,
            algos: vec![algo],
            eps,
            delta,
            rounds,
            clients,
            seeds: 5,
            root_seed: 0,
            hyper: HyperSource::Tune { fast: true },
            local_steps: 10,
            batch: 40,
            u: 1.25,
            u1: 3.0,
            u2: 3.0,
            hidden_units: 10,
            literal_init: false,
            check_every: 20,
            train_fraction: 0.8,
        }
    }

    pub fn budget(&self) -> Result<PrivacyBudget, HarnessError> {
        Ok(PrivacyBudget::new(self.eps, self.delta)?)
    }

    pub fn grid(&self) -> Option<TuningGrid> {
        match self.hyper {
            HyperSource::Tune { fast: true } => Some(TuningGrid::fast()),
            HyperSource::Tune { fast: false } => Some(TuningGrid::full()),
            HyperSource::Fixed(_) => None,
        }
    }
}

/// Everything one seed needs: the split, federation, initial point and run stream.
#[derive(Clone, Debug)]
pub struct PreparedSeed {
    pub seed: u64,
    pub spec: ModelSpec,
    pub federation: Federation,
    pub test: Vec<Sample>,
    pub x0: ParamVector,
    pub run: RngStream,
    pub stats: NormalizationStats,
}

/// Seed `seed` (1-based) draws its split, partition, initialization and run
/// randomness from `root/("seed", seed)/…`, independent of the algorithm.
pub fn prepare_seed(raw: &RawDataset, cfg: &ExperimentConfig, seed: u64) -> Result<PreparedSeed, HarnessError> {
    let s = RngStream::new(cfg.root_seed).derive("seed", seed);
    let (train, test, stats) = prepare(raw, cfg.train_fraction, &s.derive("split", 0))?;
    let spec = match raw.task {
        TaskKind::Regression => ModelSpec::regression(train.feature_names.len(), cfg.hidden_units),
        TaskKind::Classification => ModelSpec::classification(train.feature_names.len(), cfg.hidden_units, raw.classes()),
    };
    let federation = partition_iid(&train.samples(), cfg.clients, &s.derive("partition", 0))?;
    let x0 = init_params(&spec, &s.derive("init", 0), cfg.literal_init);
    Ok(PreparedSeed {
        seed,
        spec,
        federation,
        test: test.samples(),
        x0,
        run: s.derive("run", 0),
        stats,
    })
}

/// Noise plan for `algo` at restart interval `t`; `None` for non-private GD.
pub fn noise_plan(cfg: &ExperimentConfig, algo: Algo, t: Option<u64>, n_min: usize) -> Result<Option<NoisePlan>, HarnessError> {
    let budget = cfg.budget()?;
    let (r, n, p) = (cfg.rounds, n_min as u64, cfg.clients as u64);
    let plan = match algo {
        Algo::Gd => return Ok(None),
        Algo::DpGd => calibrate_diff2_gd(&budget, r, 1, n, p, BudgetSplit::RestartOnly)?,
        Algo::Diff2Gd => {
            let t = t.ok_or_else(|| HarnessError::Config("diff2-gd needs a restart interval".into()))?;
            calibrate_diff2_gd(&budget, r, t, n, p, BudgetSplit::Ratio(cfg.u))?
        }
        Algo::Diff2BvrLsgd => {
            let t = t.ok_or_else(|| HarnessError::Config("diff2-bvr-lsgd needs a restart interval".into()))?;
            let plan = calibrate_diff2_bvrlsgd(
                &budget,
                r,
                t,
                cfg.local_steps as u64,
                p,
                n,
                cfg.batch as u64,
                cfg.u1,
                cfg.u2,
            )?;
            if !plan.feasible {
                return Err(HarnessError::Infeasible(plan.reasons.join("; ")));
            }
            plan
        }
    };
    Ok(Some(plan))
}

/// Calibrate and audit in one call.
pub fn plan_with_audit(cfg: &ExperimentConfig, algo: Algo, t: Option<u64>, n_min: usize) -> Result<Option<(NoisePlan, BudgetAudit)>, HarnessError> {
    match noise_plan(cfg, algo, t, n_min)? {
        Some(plan) => {
            let audit = verify_budget(&plan, &MechanismSchedule::from_plan(&plan))?;
            Ok(Some((plan, audit)))
        }
        None => Ok(None),
    }
}

fn required(v: Option<f64>, name: &str, algo: Algo) -> Result<f64, HarnessError> {
    v.ok_or_else(|| HarnessError::Config(format!("{algo} needs --{name}")))
}

/// One training run of `algo` with fixed hyperparameters.
pub fn run_trial<O>(
    cfg: &ExperimentConfig,
    algo: Algo,
    seed: &PreparedSeed,
    hyper: &Hyper,
    plan: Option<&NoisePlan>,
    observer: O,
) -> Result<RunOutput, HarnessError>
where
    O: FnMut(&RoundRecord) -> ControlFlow<()>,
{
    let monitor = Monitor {
        stride: 1,
        test: Some(&seed.test),
    };
    let (fed, spec, x0, run) = (&seed.federation, &seed.spec, &seed.x0, &seed.run);
    let sigma1 = plan.map_or(0.0, NoisePlan::sigma1);
    let out = match algo {
        Algo::Gd => run_dp_gd(cfg.rounds, hyper.eta, f64::INFINITY, 0.0, fed, spec, x0, run, monitor, observer)?,
        Algo::DpGd => {
            let c1 = required(hyper.c1, "c1", algo)?;
            run_dp_gd(cfg.rounds, hyper.eta, c1, sigma1, fed, spec, x0, run, monitor, observer)?
        }
        Algo::Diff2Gd | Algo::Diff2BvrLsgd => {
            let plan = plan.ok_or_else(|| HarnessError::Config(format!("{algo} needs a noise plan")))?;
            let c2 = required(hyper.c2, "c2", algo)?;
            let mut config = Diff2Config::gd(
                cfg.rounds,
                hyper
                    .restart_interval
                    .ok_or_else(|| HarnessError::Config(format!("{algo} needs --restart-interval")))?,
                hyper.eta,
                required(hyper.c1, "c1", algo)?,
                c2,
                sigma1,
                plan.sigma2(),
            );
            if algo == Algo::Diff2BvrLsgd {
                config.routine = Routine::BvrLsgd {
                    local_steps: cfg.local_steps,
                    batch: cfg.batch,
                };
                config.c3 = hyper.c3.unwrap_or(c2);
                config.sigma3 = plan.sigma3();
            }
            run_diff2(&config, fed, spec, x0, run, monitor, observer)?
        }
    };
    Ok(out)
}

/// The run chosen for one criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub hyper: Hyper,
    pub min_train_loss: f64,
    pub min_train_sq_grad_norm: f64,
    pub min_test_loss: Option<f64>,
    pub r_hat: Option<u64>,
    pub comm_up: u64,
    pub comm_down: u64,
    #[serde(skip)]
    pub records: Vec<RoundRecord>,
}

fn selected(hyper: Hyper, records: Vec<RoundRecord>, out: &RunSummaryBits) -> Selected {
    let min = |f: &dyn Fn(&RoundRecord) -> f64| records.iter().map(f).fold(f64::INFINITY, f64::min);
    let min_test = records.iter().filter_map(|r| r.test_loss).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
    Selected {
        hyper,
        min_train_loss: min(&|r| r.train_loss),
        min_train_sq_grad_norm: min(&|r| r.train_sq_grad_norm),
        min_test_loss: min_test,
        r_hat: out.r_hat,
        comm_up: out.comm.0,
        comm_down: out.comm.1,
        records,
    }
}

#[derive(Clone, Copy, Debug)]
struct RunSummaryBits {
    r_hat: Option<u64>,
    comm: (u64, u64),
}

impl From<&RunOutput> for RunSummaryBits {
    fn from(out: &RunOutput) -> Self {
        Self {
            r_hat: out.r_hat,
            comm: out.comm.totals(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Winner for train loss; its curve also supplies the reported test loss.
    pub train: Selected,
    /// Winner for the squared train gradient norm.
    pub grad: Selected,
    pub attempts: Vec<Attempt>,
    pub removed_features: Vec<String>,
}

/// Tune (or run fixed hyperparameters) for one algorithm on one seed.
pub fn run_seed(cfg: &ExperimentConfig, algo: Algo, seed: &PreparedSeed) -> Result<SeedOutcome, HarnessError> {
    let n_min = seed.federation.n_min();
    let removed_features = seed.stats.dropped.clone();
    match &cfg.hyper {
        HyperSource::Fixed(hyper) => {
            let plan = noise_plan(cfg, algo, hyper.restart_interval, n_min)?;
            let out = run_trial(cfg, algo, seed, hyper, plan.as_ref(), |_| ControlFlow::Continue(()))?;
            if out.status != RunStatus::Completed {
                return Err(HarnessError::Incomplete(out.status));
            }
            let bits = RunSummaryBits::from(&out);
            let sel = selected(*hyper, out.records, &bits);
            Ok(SeedOutcome {
                seed: seed.seed,
                train: sel.clone(),
                grad: sel,
                attempts: Vec::new(),
                removed_features,
            })
        }
        HyperSource::Tune { .. } => {
            let grid = cfg.grid().expect("tuning config has a grid");
            let (c1, c2, t) = algo.tuned();
            let points = grid.points(c1, c2, t, cfg.rounds);
            let mut plans = std::collections::BTreeMap::new();
            for p in &points {
                if let std::collections::btree_map::Entry::Vacant(e) = plans.entry(p.restart_interval) {
                    e.insert(noise_plan(cfg, algo, p.restart_interval, n_min)?);
                }
            }
            let mut failure = None;
            let report = tune(&points, &grid.etas, cfg.check_every, |point, eta, observer| {
                let hyper = Hyper::from_point(point, eta);
                let plan = plans[&point.restart_interval].as_ref();
                match run_trial(cfg, algo, seed, &hyper, plan, |r| observer(r)) {
                    Ok(out) => Trial {
                        completed: out.status == RunStatus::Completed,
                        payload: RunSummaryBits::from(&out),
                        records: out.records,
                    },
                    Err(e) => {
                        failure.get_or_insert(e);
                        Trial {
                            completed: false,
                            records: Vec::new(),
                            payload: RunSummaryBits { r_hat: None, comm: (0, 0) },
                        }
                    }
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            let report = report?;
            let pick = |c: &crate::tuning::Candidate<RunSummaryBits>| {
                selected(Hyper::from_point(&c.point, c.eta), c.records.clone(), &c.payload)
            };
            Ok(SeedOutcome {
                seed: seed.seed,
                train: pick(report.train_winner()),
                grad: pick(report.grad_winner()),
                attempts: report.attempts,
                removed_features,
            })
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    /// Mean and sample standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            values: values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgoResult {
    pub algo: Algo,
    pub plans: Vec<NoisePlan>,
    pub audits: Vec<BudgetAudit>,
    pub seeds: Vec<SeedOutcome>,
    pub failures: Vec<(u64, String)>,
    pub min_train_loss: MeanStd,
    pub min_train_sq_grad_norm: MeanStd,
    pub min_test_loss: MeanStd,
}

/// Run `algo` over all seeds; a failing seed is recorded and the others continue.
pub fn run_experiment(cfg: &ExperimentConfig, algo: Algo, prepared: &[PreparedSeed]) -> Result<AlgoResult, HarnessError> {
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for seed in prepared {
        match run_seed(cfg, algo, seed) {
            Ok(o) => seeds.push(o),
            Err(e) => failures.push((seed.seed, e.to_string())),
        }
    }
    let n_min = prepared.first().map_or(0, |s| s.federation.n_min());
    let ts: Vec<Option<u64>> = match (&cfg.hyper, algo) {
        (_, Algo::Gd) => vec![],
        (_, Algo::DpGd) => vec![None],
        (HyperSource::Fixed(h), _) => vec![h.restart_interval],
        (HyperSource::Tune { .. }, _) => cfg
            .grid()
            .unwrap()
            .restart_intervals(cfg.rounds)
            .into_iter()
            .map(Some)
            .collect(),
    };
    let mut plans = Vec::new();
    let mut audits = Vec::new();
    if n_min > 0 {
        for t in ts {
            if let Some((plan, audit)) = plan_with_audit(cfg, algo, t, n_min)? {
                plans.push(plan);
                audits.push(audit);
            }
        }
    }
    let collect = |f: &dyn Fn(&SeedOutcome) -> f64| MeanStd::of(&seeds.iter().map(f).collect::<Vec<_>>());
    Ok(AlgoResult {
        algo,
        plans,
        audits,
        min_train_loss: collect(&|s| s.train.min_train_loss),
        min_train_sq_grad_norm: collect(&|s| s.grad.min_train_sq_grad_norm),
        min_test_loss: collect(&|s| s.train.min_test_loss.unwrap_or(f64::NAN)),
        seeds,
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: Algo,
    pub candidate: Algo,
    pub criterion: String,
    /// `candidate − baseline` per seed.
    pub diffs: Vec<f64>,
    pub test: Option<TTest>,
    pub note: Option<String>,
}

/// Paired comparisons of `candidate` against `baseline` on the three criteria.
pub fn compare(baseline: &AlgoResult, candidate: &AlgoResult) -> Vec<Comparison> {
    let criteria: [(&str, fn(&SeedOutcome) -> f64); 3] = [
        ("train_loss", |s| s.train.min_train_loss),
        ("train_sq_grad_norm", |s| s.grad.min_train_sq_grad_norm),
        ("test_loss", |s| s.train.min_test_loss.unwrap_or(f64::NAN)),
    ];
    criteria
        .iter()
        .map(|(name, f)| {
            let diffs: Vec<f64> = candidate
                .seeds
                .iter()
                .filter_map(|c| baseline.seeds.iter().find(|b| b.seed == c.seed).map(|b| f(c) - f(b)))
                .collect();
            let (test, note) = match paired_one_sided_t_test(&diffs) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Comparison {
                baseline: baseline.algo,
                candidate: candidate.algo,
                criterion: name.to_string(),
                diffs,
                test,
                note,
            }
        })
        .collect()
}

/// Every configured algorithm over every seed, plus comparisons of each later
/// algorithm against the first.
pub fn run_configured(cfg: &ExperimentConfig, raw: &RawDataset) -> Result<(Vec<AlgoResult>, Vec<Comparison>), HarnessError> {
    if cfg.algos.is_empty() {
        return Err(HarnessError::Config("no algorithm selected".into()));
    }
    if cfg.seeds == 0 {
        return Err(HarnessError::Config("--seeds must be positive".into()));
    }
    let prepared = (1..=cfg.seeds)
        .map(|s| prepare_seed(raw, cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    let results = cfg
        .algos
        .iter()
        .map(|&a| run_experiment(cfg, a, &prepared))
        .collect::<Result<Vec<_>, _>>()?;
    let comparisons = results[1..].iter().flat_map(|r| compare(&results[0], r)).collect();
    Ok((results, comparisons))
}
