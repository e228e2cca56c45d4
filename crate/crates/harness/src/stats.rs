//! Paired one-sided t-test with four degrees of freedom.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("the paired test takes exactly 5 differences, got {0}")]
    WrongCount(usize),
    #[error("non-finite difference {0}")]
    NonFinite(f64),
}

/// Density of Student's t with 4 degrees of freedom: `(3/8)(1 + s²/4)^{−5/2}`.
fn t4_density(s: f64) -> f64 {
    0.375 * (1.0 + s * s / 4.0).powf(-2.5)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// CDF of Student's t with 4 degrees of freedom by quadrature of the density.
///
/// The body `[0, min(|t|, 50)]` is integrated directly; beyond 50 the tail is
/// integrated after the substitution `s = 1/u`, which keeps it on a short,
/// smooth interval.
pub fn student_t4_cdf(t: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let a = t.abs();
    let cut = 50.0;
    let mut mass = integrate(&t4_density, 0.0, a.min(cut), 1e-14);
    if a > cut {
        let tail = |u: f64| if u == 0.0 { 0.0 } else { t4_density(1.0 / u) / (u * u) };
        let lo = if a.is_infinite() { 0.0 } else { 1.0 / a };
        mass += integrate(&tail, lo, 1.0 / cut, 1e-16);
    }
    let mass = mass.min(0.5);
    if t >= 0.0 {
        0.5 + mass
    } else {
        0.5 - mass
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_stat: f64,
    /// Lower-tail p-value: small when the differences are convincingly negative.
    pub p_value: f64,
    pub mean: f64,
    pub sd: f64,
}

/// One-sided paired t-test over five per-seed differences, alternative
/// "mean difference < 0". Uses the sample standard deviation (divisor 4).
pub fn paired_one_sided_t_test(diffs: &[f64]) -> Result<TTest, StatsError> {
    if diffs.len() != 5 {
        return Err(StatsError::WrongCount(diffs.len()));
    }
    if let Some(&bad) = diffs.iter().find(|d| !d.is_finite()) {
        return Err(StatsError::NonFinite(bad));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (t_stat, p_value) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 0.5)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 0.0)
        } else {
            (f64::INFINITY, 1.0)
        }
    } else {
        let t = mean / (sd / n.sqrt());
        (t, student_t4_cdf(t))
    };
    Ok(TTest {
        t_stat,
        p_value,
        mean,
        sd,
    })
}
