//! Rényi-DP accounting for the DIFF2 family.
//!
//! Two structurally different paths live here. The `calibrate_*` functions
//! return the closed-form noise variances; [`verify_budget`] independently
//! re-derives the privacy cost of a plan by running each mechanism through the
//! Gaussian-mechanism RDP bound, composing, amplifying by subsampling where the
//! schedule says so, and converting to `(ε, δ)`-DP.
//!
//! Noise variances are expressed as multipliers: a mechanism clipped at radius
//! `C` with multiplier `σ` adds `N(0, σ²C²I)`. Its RDP at order `α` is
//! `α Δ² / (2 σ² C²)` with `Δ = 2C/(n P)`, so `C` always cancels.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AccountantError {
    #[error("invalid privacy budget: eps={eps}, delta={delta} (need eps > 0, 0 < delta < 1)")]
    InvalidBudget { eps: f64, delta: f64 },
    #[error("Renyi order must exceed 1, got {0}")]
    InvalidOrder(f64),
    #[error("zero noise with positive sensitivity {0} has unbounded RDP")]
    ZeroNoise(f64),
    #[error("cannot compose RDP points at different orders ({expected} vs {found})")]
    OrderMismatch { expected: f64, found: f64 },
    #[error("restart interval {interval} must lie in [1, {rounds}]")]
    InvalidInterval { interval: u64, rounds: u64 },
    #[error("the u -> 1 limit needs every round to be a restart round (T = 1), got T = {0}")]
    LimitNeedsSingleInterval(u64),
    #[error("split parameter u must exceed 1, got {0}")]
    InvalidSplit(f64),
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("schedule does not match plan: {0}")]
    ScheduleMismatch(String),
}

/// Target record-level `(ε_DP, δ_DP)` guarantee.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub eps: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(eps: f64, delta: f64) -> Result<Self, AccountantError> {
        if eps > 0.0 && eps.is_finite() && delta > 0.0 && delta < 1.0 {
            Ok(Self { eps, delta })
        } else {
            Err(AccountantError::InvalidBudget { eps, delta })
        }
    }
}

/// `(α, ε(α))`-RDP statement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpPoint {
    pub alpha: f64,
    pub eps: f64,
}

/// Rényi order used by every calibration: `1 + ⌈2 ln(1/δ)/ε⌉`.
///
/// With this choice the RDP-to-DP conversion term `ln(1/δ)/(α−1)` is at most
/// `ε/2`, leaving the other half of the budget for the mechanisms.
pub fn select_alpha(budget: &PrivacyBudget) -> u32 {
    let ratio = 2.0 * (1.0 / budget.delta).ln() / budget.eps;
    1 + ratio.ceil().max(1.0) as u32
}

/// RDP of the Gaussian mechanism: `α Δ² / (2 σ²)`.
pub fn gaussian_rdp(sensitivity: f64, noise_std: f64, alpha: f64) -> Result<RdpPoint, AccountantError> {
    if !(alpha > 1.0) {
        return Err(AccountantError::InvalidOrder(alpha));
    }
    if sensitivity == 0.0 {
        return Ok(RdpPoint { alpha, eps: 0.0 });
    }
    if noise_std <= 0.0 {
        return Err(AccountantError::ZeroNoise(sensitivity));
    }
    Ok(RdpPoint {
        alpha,
        eps: alpha * sensitivity * sensitivity / (2.0 * noise_std * noise_std),
    })
}

/// Adaptive composition: RDP costs at a common order add up.
pub fn compose(alpha: f64, points: &[RdpPoint]) -> Result<RdpPoint, AccountantError> {
    let mut eps = 0.0;
    for p in points {
        if p.alpha != alpha {
            return Err(AccountantError::OrderMismatch {
                expected: alpha,
                found: p.alpha,
            });
        }
        eps += p.eps;
    }
    Ok(RdpPoint { alpha, eps })
}

/// `(α, ε)`-RDP implies `(ε + ln(1/δ)/(α−1), δ)`-DP.
pub fn rdp_to_dp(point: &RdpPoint, delta: f64) -> f64 {
    point.eps + (1.0 / delta).ln() / (point.alpha - 1.0)
}

/// `ln(e^x − 1)` without overflow for large `x`.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln C(n, k)` by a running product of ratios.
fn ln_binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64 / (i + 1) as f64).ln()).sum()
}

/// Subsampled-mechanism RDP bound at integer order `α` for sampling without
/// replacement at fraction `γ`, evaluated from its full binomial sum.
///
/// `eps_fn(j)` is the RDP of the base mechanism at order `j`; `eps_inf` is its
/// `ε(∞)` and may be `f64::INFINITY` (then every `min{2, ·}` takes the 2).
/// Terms are accumulated in log space so orders up to a few hundred neither
/// overflow nor lose the small-γ precision; an unbounded result is reported as
/// `f64::INFINITY`.
pub fn subsample_amplified_rdp_exact<F>(eps_fn: F, gamma: f64, alpha: u32, eps_inf: f64) -> f64
where
    F: Fn(u32) -> f64,
{
    assert!(alpha >= 2, "order must be an integer >= 2");
    assert!((0.0..=1.0).contains(&gamma), "sampling fraction must be in [0, 1]");
    if gamma == 0.0 {
        return 0.0;
    }
    let ln_gamma = gamma.ln();
    let ln_inf_term = |j: u32| -> f64 {
        // ln min{2, (e^{ε(∞)} − 1)^j}
        let ln2 = std::f64::consts::LN_2;
        if eps_inf.is_infinite() {
            ln2
        } else {
            ln2.min(j as f64 * ln_expm1(eps_inf))
        }
    };

    let mut log_terms = Vec::with_capacity(alpha as usize - 1);
    let eps2 = eps_fn(2);
    if eps2.is_nan() || eps2 == f64::INFINITY {
        return f64::INFINITY;
    }
    // ln min{4(e^{ε(2)} − 1), e^{ε(2)} min{2, (e^{ε(∞)} − 1)^2}}
    let quad = (4f64.ln() + ln_expm1(eps2)).min(eps2 + ln_inf_term(2));
    log_terms.push(2.0 * ln_gamma + ln_binomial(alpha, 2) + quad);
    for j in 3..=alpha {
        let eps_j = eps_fn(j);
        if eps_j.is_nan() || eps_j == f64::INFINITY {
            return f64::INFINITY;
        }
        log_terms.push(
            j as f64 * ln_gamma + ln_binomial(alpha, j) + (j - 1) as f64 * eps_j + ln_inf_term(j),
        );
    }

    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ln_total = if max == f64::NEG_INFINITY {
        0.0
    } else if max < 0.0 {
        log_terms.iter().map(|t| t.exp()).sum::<f64>().ln_1p()
    } else {
        let scaled: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
        max + ((-max).exp() + scaled).ln()
    };
    ln_total / (alpha - 1) as f64
}

/// Closed-form upper bound on the subsampled RDP together with a flag telling
/// whether its validity conditions hold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimpleBound {
    pub value: f64,
    pub conditions_hold: bool,
}

/// `(2/3)(4 + e/c) γ² α² ε(2) / (α − 1)`.
///
/// Valid when `ε(α) ≤ 1/3`, `ε(α) ≤ ln(1/(2γα))` and `γ ≤ ε(2)/(cα)`; the
/// flag in the result reports this, the value is returned either way.
pub fn subsample_amplified_rdp_simple(eps2: f64, eps_alpha: f64, gamma: f64, alpha: u32, c: f64) -> SimpleBound {
    assert!(alpha >= 2, "order must be an integer >= 2");
    assert!(c > 0.0, "c must be positive");
    let a = alpha as f64;
    let value = (2.0 / 3.0) * (4.0 + E / c) * gamma * gamma * a * a * eps2 / (a - 1.0);
    let conditions_hold = eps_alpha <= 1.0 / 3.0
        && eps_alpha <= (1.0 / (2.0 * gamma * a)).ln()
        && gamma <= eps2 / (c * a);
    SimpleBound {
        value,
        conditions_hold,
    }
}

/// How the DIFF2-GD budget is split between restart and difference rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSplit {
    /// Restart rounds get `1/u` of the mechanism budget, difference rounds the rest.
    Ratio(f64),
    /// The `u → 1` limit: only valid when every round is a restart round (DP-GD).
    RestartOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanRoutine {
    Gd,
    BvrLsgd,
}

/// Calibrated noise multipliers plus the inputs they were derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub routine: PlanRoutine,
    pub budget: PrivacyBudget,
    pub rounds: u64,
    pub restart_interval: u64,
    pub n_min: u64,
    pub clients: u64,
    pub local_steps: Option<u64>,
    pub batch: Option<u64>,
    pub alpha: u32,
    /// Split actually used for σ₁ (1 when there are no difference rounds).
    pub u: Option<f64>,
    pub u1: Option<f64>,
    pub u2: Option<f64>,
    pub sigma1_sq: f64,
    /// Absent when the schedule has no difference rounds.
    pub sigma2_sq: Option<f64>,
    pub sigma3_sq: Option<f64>,
    /// Subsampled RDP `ε'(α)` of one local step, from the exact binomial sum.
    pub local_step_rdp: Option<f64>,
    /// Whether the minibatch conditions behind the closed-form `σ₃²` hold.
    pub closed_form_conditions: Option<bool>,
    pub feasible: bool,
    pub reasons: Vec<String>,
}

impl NoisePlan {
    pub fn restart_rounds(&self) -> u64 {
        ceil_div(self.rounds, self.restart_interval)
    }

    pub fn difference_rounds(&self) -> u64 {
        self.rounds - self.restart_rounds()
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1_sq.sqrt()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2_sq.unwrap_or(0.0).sqrt()
    }

    pub fn sigma3(&self) -> f64 {
        self.sigma3_sq.unwrap_or(0.0).sqrt()
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

fn check_schedule(rounds: u64, interval: u64) -> Result<(), AccountantError> {
    if rounds == 0 {
        return Err(AccountantError::NonPositive("rounds"));
    }
    if interval == 0 || interval > rounds {
        return Err(AccountantError::InvalidInterval { interval, rounds });
    }
    Ok(())
}

/// Closed-form noise multipliers for DIFF2-GD:
///
/// `σ₁² = 4uα⌈R/T⌉ / (n_min² P² ε)` and `σ₂² = (4u/(u−1)) α (R − ⌈R/T⌉) / (n_min² P² ε)`.
///
/// When the schedule has no difference rounds the split is irrelevant and the
/// whole mechanism budget goes to the restart rounds (`u = 1`), which is the
/// DP-GD setting.
pub fn calibrate_diff2_gd(
    budget: &PrivacyBudget,
    rounds: u64,
    restart_interval: u64,
    n_min: u64,
    clients: u64,
    split: BudgetSplit,
) -> Result<NoisePlan, AccountantError> {
    check_schedule(rounds, restart_interval)?;
    if n_min == 0 {
        return Err(AccountantError::NonPositive("n_min"));
    }
    if clients == 0 {
        return Err(AccountantError::NonPositive("clients"));
    }
    let restarts = ceil_div(rounds, restart_interval);
    let differences = rounds - restarts;
    let mut reasons = Vec::new();
    let u = match split {
        BudgetSplit::RestartOnly => {
            if differences > 0 {
                return Err(AccountantError::LimitNeedsSingleInterval(restart_interval));
            }
            1.0
        }
        BudgetSplit::Ratio(u) => {
            if !(u > 1.0) || !u.is_finite() {
                return Err(AccountantError::InvalidSplit(u));
            }
            if differences == 0 {
                reasons.push(format!(
                    "no difference rounds: split u={u} collapsed to 1 (all budget to restart rounds)"
                ));
                1.0
            } else {
                u
            }
        }
    };

    let alpha = select_alpha(budget);
    let a = alpha as f64;
    let denom = (n_min as f64).powi(2) * (clients as f64).powi(2) * budget.eps;
    let sigma1_sq = 4.0 * u * a * restarts as f64 / denom;
    let sigma2_sq = (differences > 0).then(|| (4.0 * u / (u - 1.0)) * a * differences as f64 / denom);

    Ok(NoisePlan {
        routine: PlanRoutine::Gd,
        budget: *budget,
        rounds,
        restart_interval,
        n_min,
        clients,
        local_steps: None,
        batch: None,
        alpha,
        u: Some(u),
        u1: None,
        u2: None,
        sigma1_sq,
        sigma2_sq,
        sigma3_sq: None,
        local_step_rdp: None,
        closed_form_conditions: None,
        feasible: true,
        reasons,
    })
}

/// RDP of one noisy local step before subsampling: `ε(j) = 2j / (b² σ₃²)`.
pub fn local_step_base_rdp(batch: u64, sigma3_sq: f64) -> impl Fn(u32) -> f64 {
    let b = batch as f64;
    move |j| 2.0 * j as f64 / (b * b * sigma3_sq)
}

/// Noise multipliers for DIFF2-BVR-L-SGD.
///
/// `σ₁², σ₂²` take `1/u₁` and `1/u₂` of the mechanism budget; `σ₃²` is the
/// larger of `(8/3)(4+e)(α²/(α−1))·(2/s)·K⌈R/P⌉/(n_min² ε)` and `6α/b²`, where
/// `s = 1 − 1/u₁ − 1/u₂` is the share left for the local steps (`2/s = 6` at
/// `u₁ = u₂ = 3`). The plan is marked feasible only when `s > 0` and the exact
/// subsampled-RDP audit `2K⌈R/P⌉ ε'(α) ≤ s ε` passes with `γ = b/n_min`.
/// The minibatch conditions under which the closed form alone would suffice
/// are reported separately in `closed_form_conditions`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_diff2_bvrlsgd(
    budget: &PrivacyBudget,
    rounds: u64,
    restart_interval: u64,
    local_steps: u64,
    clients: u64,
    n_min: u64,
    batch: u64,
    u1: f64,
    u2: f64,
) -> Result<NoisePlan, AccountantError> {
    check_schedule(rounds, restart_interval)?;
    if local_steps == 0 {
        return Err(AccountantError::NonPositive("local_steps"));
    }
    if batch == 0 {
        return Err(AccountantError::NonPositive("batch"));
    }
    if n_min == 0 {
        return Err(AccountantError::NonPositive("n_min"));
    }
    if clients == 0 {
        return Err(AccountantError::NonPositive("clients"));
    }
    for u in [u1, u2] {
        if !(u > 1.0) || !u.is_finite() {
            return Err(AccountantError::InvalidSplit(u));
        }
    }

    let alpha = select_alpha(budget);
    let a = alpha as f64;
    let n = n_min as f64;
    let p = clients as f64;
    let b = batch as f64;
    let restarts = ceil_div(rounds, restart_interval);
    let differences = rounds - restarts;
    let local_rounds = ceil_div(rounds, clients);
    let denom = n * n * p * p * budget.eps;
    let sigma1_sq = 4.0 * u1 * a * restarts as f64 / denom;
    let sigma2_sq = (differences > 0).then(|| 4.0 * u2 * a * differences as f64 / denom);

    let mut reasons = Vec::new();
    let slack = 1.0 - 1.0 / u1 - 1.0 / u2;
    let mut feasible = true;
    if slack <= 0.0 {
        feasible = false;
        reasons.push(format!("1/u1 + 1/u2 = {:.6} >= 1 leaves no budget for local steps", 1.0 - slack));
    }
    if batch > n_min {
        feasible = false;
        reasons.push(format!("batch {batch} exceeds n_min {n_min}"));
    }

    let sigma3_sq = if slack > 0.0 {
        let term_steps = (8.0 / 3.0) * (4.0 + E) * (a * a / (a - 1.0)) * (2.0 / slack) * (local_steps * local_rounds) as f64
            / (n * n * budget.eps);
        let term_batch = 6.0 * a / (b * b);
        term_steps.max(term_batch)
    } else {
        f64::INFINITY
    };

    let bound_ratio = n / (2.0 * E * a);
    let bound_cube = (4.0 * n / (a * sigma3_sq)).cbrt();
    let closed_form = b <= bound_ratio && b <= bound_cube;
    if b > bound_ratio {
        reasons.push(format!("closed form: batch {batch} > n_min/(2e alpha) = {bound_ratio:.3}"));
    }
    if b > bound_cube {
        reasons.push(format!(
            "closed form: batch {batch} > (4 n_min/(alpha sigma3^2))^(1/3) = {bound_cube:.3}"
        ));
    }

    let local_step_rdp = if sigma3_sq.is_finite() && batch <= n_min {
        let gamma = b / n;
        let eps_prime = subsample_amplified_rdp_exact(local_step_base_rdp(batch, sigma3_sq), gamma, alpha, f64::INFINITY);
        let lhs = 2.0 * (local_steps * local_rounds) as f64 * eps_prime;
        let rhs = slack * budget.eps;
        if !(lhs <= rhs) {
            feasible = false;
            reasons.push(format!("exact subsampling audit failed: 2K*ceil(R/P)*eps'(alpha) = {lhs:.6e} > {rhs:.6e}"));
        }
        Some(eps_prime)
    } else {
        None
    };

    Ok(NoisePlan {
        routine: PlanRoutine::BvrLsgd,
        budget: *budget,
        rounds,
        restart_interval,
        n_min,
        clients,
        local_steps: Some(local_steps),
        batch: Some(batch),
        alpha,
        u: None,
        u1: Some(u1),
        u2: Some(u2),
        sigma1_sq,
        sigma2_sq,
        sigma3_sq: Some(sigma3_sq),
        local_step_rdp,
        closed_form_conditions: Some(closed_form),
        feasible,
        reasons,
    })
}

/// Mechanism counts to audit a plan against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismSchedule {
    pub restart_rounds: u64,
    pub difference_rounds: u64,
    /// Number of subsampled noisy local steps charged to one client.
    pub local_steps: u64,
    pub sampling_fraction: f64,
}

impl MechanismSchedule {
    /// The schedule the calibration itself assumes: `⌈R/T⌉` restarts,
    /// `R − ⌈R/T⌉` difference rounds and `K⌈R/P⌉` local steps at `γ = b/n_min`.
    pub fn from_plan(plan: &NoisePlan) -> Self {
        let (local_steps, sampling_fraction) = match (plan.local_steps, plan.batch) {
            (Some(k), Some(b)) => (k * ceil_div(plan.rounds, plan.clients), b as f64 / plan.n_min as f64),
            _ => (0, 0.0),
        };
        Self {
            restart_rounds: plan.restart_rounds(),
            difference_rounds: plan.difference_rounds(),
            local_steps,
            sampling_fraction,
        }
    }
}

/// Result of [`verify_budget`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetAudit {
    pub alpha: u32,
    pub restart_rdp: f64,
    pub difference_rdp: f64,
    pub local_rdp: f64,
    /// Total RDP at order `alpha` of everything the server releases.
    pub composed_rdp: f64,
    /// `ln(1/δ)/(α − 1)`.
    pub conversion: f64,
    pub eps_total: f64,
    pub delta: f64,
}

impl BudgetAudit {
    pub fn within(&self, budget: &PrivacyBudget) -> bool {
        self.eps_total <= budget.eps
    }
}

/// Recompute the privacy cost of `plan` under `schedule` from first principles.
pub fn verify_budget(plan: &NoisePlan, schedule: &MechanismSchedule) -> Result<BudgetAudit, AccountantError> {
    let alpha = plan.alpha as f64;
    let agg_sensitivity = 2.0 / (plan.n_min as f64 * plan.clients as f64);

    let repeated = |point: RdpPoint, count: u64| compose(alpha, &vec![point; count as usize]);

    let restart_rdp = if schedule.restart_rounds > 0 {
        let point = gaussian_rdp(agg_sensitivity, plan.sigma1(), alpha)
            .map_err(|e| AccountantError::ScheduleMismatch(format!("restart rounds: {e}")))?;
        repeated(point, schedule.restart_rounds)?.eps
    } else {
        0.0
    };

    let difference_rdp = if schedule.difference_rounds > 0 {
        let sigma2 = plan
            .sigma2_sq
            .filter(|s| *s > 0.0)
            .ok_or_else(|| {
                AccountantError::ScheduleMismatch(format!(
                    "{} difference rounds but the plan has no sigma2",
                    schedule.difference_rounds
                ))
            })?
            .sqrt();
        repeated(gaussian_rdp(agg_sensitivity, sigma2, alpha)?, schedule.difference_rounds)?.eps
    } else {
        0.0
    };

    let local_rdp = if schedule.local_steps > 0 {
        let (batch, sigma3_sq) = match (plan.batch, plan.sigma3_sq) {
            (Some(b), Some(s)) if s > 0.0 && s.is_finite() => (b, s),
            _ => {
                return Err(AccountantError::ScheduleMismatch(format!(
                    "{} local steps but the plan has no usable sigma3",
                    schedule.local_steps
                )))
            }
        };
        let sigma3 = sigma3_sq.sqrt();
        let step_sensitivity = 2.0 / batch as f64;
        let base = |j: u32| {
            gaussian_rdp(step_sensitivity, sigma3, j as f64)
                .map(|p| p.eps)
                .unwrap_or(f64::INFINITY)
        };
        let per_step = subsample_amplified_rdp_exact(base, schedule.sampling_fraction, plan.alpha, f64::INFINITY);
        repeated(RdpPoint { alpha, eps: per_step }, schedule.local_steps)?.eps
    } else {
        0.0
    };

    let composed = compose(
        alpha,
        &[
            RdpPoint { alpha, eps: restart_rdp },
            RdpPoint { alpha, eps: difference_rdp },
            RdpPoint { alpha, eps: local_rdp },
        ],
    )?;
    let eps_total = rdp_to_dp(&composed, plan.budget.delta);
    Ok(BudgetAudit {
        alpha: plan.alpha,
        restart_rdp,
        difference_rdp,
        local_rdp,
        composed_rdp: composed.eps,
        conversion: eps_total - composed.eps,
        eps_total,
        delta: plan.budget.delta,
    })
}
