use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diff2_core::data::{load_csv, CsvSchema, TaskKind};
use diff2_harness::experiment::{
    plan_with_audit, run_configured, Algo, ExperimentConfig, HarnessError, Hyper, HyperSource,
};
use diff2_harness::output::emit_outputs;
use diff2_harness::selftest;

#[derive(Parser)]
#[command(name = "diff2", version, about = "Differentially private federated optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, tune and write curves, plots and a summary.
    Run(RunArgs),
    /// Print the noise plan and its privacy audit.
    Calibrate(CalibrateArgs),
    /// Run the built-in invariant suites.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Regression,
    Classification,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Regression => TaskKind::Regression,
            Task::Classification => TaskKind::Classification,
        }
    }
}

#[derive(Args)]
struct Common {
    /// One or more of gd, dp-gd, diff2-gd, diff2-bvr-lsgd (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    algo: Vec<Algo>,
    #[arg(long, default_value_t = 3.0)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, default_value_t = 2000)]
    rounds: u64,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long = "restart-interval")]
    restart_interval: Option<u64>,
    #[arg(long = "local-steps", default_value_t = 10)]
    local_steps: usize,
    #[arg(long, default_value_t = 40)]
    batch: usize,
    /// Budget split ratio for diff2-gd.
    #[arg(long, default_value_t = 1.25)]
    u: f64,
    #[arg(long, default_value_t = 3.0)]
    u1: f64,
    #[arg(long, default_value_t = 3.0)]
    u2: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "regression")]
    task: Task,
    /// Target column; defaults to the last column.
    #[arg(long)]
    target: Option<String>,
    /// Columns to ignore.
    #[arg(long, value_delimiter = ',')]
    drop: Vec<String>,
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Tune hyperparameters with the grid protocol.
    #[arg(long, conflicts_with = "eta")]
    tune: bool,
    /// Use the reduced tuning grid.
    #[arg(long, requires = "tune")]
    fast: bool,
    #[arg(long, required_unless_present = "tune")]
    eta: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    c3: Option<f64>,
    #[arg(long, default_value_t = 10)]
    hidden: usize,
    /// Initialize on [−√w_in, √w_in] instead of [−1/√w_in, 1/√w_in].
    #[arg(long)]
    literal_init: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Smallest client shard size.
    #[arg(long = "n-min")]
    n_min: usize,
}

fn config_from(common: &Common) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(common.algo[0], common.eps, common.delta, common.rounds, common.clients);
    cfg.algos = common.algo.clone();
    cfg.local_steps = common.local_steps;
    cfg.batch = common.batch;
    cfg.u = common.u;
    cfg.u1 = common.u1;
    cfg.u2 = common.u2;
    cfg
}

fn target_column(path: &Path) -> Result<String, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = r.headers().map_err(|e| format!("{}: {e}", path.display()))?;
    headers
        .iter()
        .next_back()
        .map(str::to_string)
        .ok_or_else(|| format!("{}: no columns", path.display()))
}

fn run(args: RunArgs) -> Result<(), String> {
    let mut cfg = config_from(&args.common);
    cfg.dataset = Some(args.dataset.clone());
    cfg.task = args.task.into();
    cfg.seeds = args.seeds;
    cfg.root_seed = args.seed;
    cfg.hidden_units = args.hidden;
    cfg.literal_init = args.literal_init;
    cfg.hyper = match args.eta {
        Some(eta) if !args.tune => HyperSource::Fixed(Hyper {
            eta,
            c1: args.c1,
            c2: args.c2,
            c3: args.c3,
            restart_interval: args.common.restart_interval,
        }),
        _ => HyperSource::Tune { fast: args.fast },
    };
    let target = match args.target {
        Some(t) => t,
        None => target_column(&args.dataset)?,
    };
    let schema = CsvSchema {
        target,
        drop: args.drop,
        task: cfg.task,
    };
    let raw = load_csv(&args.dataset, &schema).map_err(|e| e.to_string())?;
    let (results, comparisons) = run_configured(&cfg, &raw).map_err(|e| e.to_string())?;
    let files = emit_outputs(&args.out, &cfg, &results, &comparisons).map_err(|e| e.to_string())?;
    let mut failed = false;
    for r in &results {
        println!(
            "{:<15} min train loss {:.6} ± {:.6}  min grad norm² {:.3e}  min test loss {:.6}",
            r.algo.name(),
            r.min_train_loss.mean,
            r.min_train_loss.std,
            r.min_train_sq_grad_norm.mean,
            r.min_test_loss.mean
        );
        for (seed, err) in &r.failures {
            eprintln!("{} seed {seed} failed: {err}", r.algo.name());
            failed = true;
        }
    }
    for c in &comparisons {
        match &c.test {
            Some(t) => println!(
                "{} vs {} [{}]: t = {:.4}, p = {:.4e}",
                c.candidate, c.baseline, c.criterion, t.t_stat, t.p_value
            ),
            None => println!(
                "{} vs {} [{}]: {}",
                c.candidate,
                c.baseline,
                c.criterion,
                c.note.as_deref().unwrap_or("no test")
            ),
        }
    }
    println!("wrote {} files to {}", files.len(), args.out.display());
    if failed {
        Err("one or more seeds failed".into())
    } else {
        Ok(())
    }
}

fn calibrate(args: CalibrateArgs) -> Result<(), String> {
    let cfg = config_from(&args.common);
    let mut ok = true;
    for &algo in &cfg.algos {
        let t = match algo {
            Algo::Diff2Gd | Algo::Diff2BvrLsgd => Some(args.common.restart_interval.ok_or("--restart-interval is required")?),
            _ => None,
        };
        match plan_with_audit(&cfg, algo, t, args.n_min) {
            Ok(Some((plan, audit))) => {
                let doc = serde_json::json!({ "algo": algo, "plan": plan, "audit": audit, "within_budget": audit.within(&cfg.budget().map_err(|e| e.to_string())?) });
                println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| e.to_string())?);
            }
            Ok(None) => println!("{{\"algo\": \"{algo}\", \"plan\": null}}"),
            Err(HarnessError::Infeasible(why)) => {
                eprintln!("{algo}: infeasible: {why}");
                ok = false;
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    if ok {
        Ok(())
    } else {
        Err("infeasible noise plan".into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err("selftest failed".into())
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
