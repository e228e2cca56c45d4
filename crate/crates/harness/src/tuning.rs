//! Grid search with learning-rate patience.
//!
//! For every radius/restart-interval point the learning rates are tried from
//! largest to smallest. A run is abandoned when the train loss (checked every
//! `check_every` rounds) is non-finite or the patience counter reaches 5; the
//! first learning rate that completes all rounds ends the search at that point.
//! Ties between points go to the first in grid order.

use std::ops::ControlFlow;

use diff2_core::framework::RoundRecord;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PATIENCE_LIMIT: u32 = 5;
pub const PATIENCE_FACTOR: f64 = 1.05;

#[derive(Debug, Error, PartialEq)]
pub enum TuningError {
    #[error("every learning rate was abandoned at every grid point ({attempts} attempts)")]
    NothingCompleted { attempts: usize },
    #[error("empty tuning grid")]
    EmptyGrid,
}

/// Hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub restart_interval: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub etas: Vec<f64>,
    pub radii: Vec<f64>,
    pub t_fractions: Vec<f64>,
}

impl TuningGrid {
    pub fn full() -> Self {
        Self {
            etas: (0..10).map(|i| 0.5f64.powi(i)).collect(),
            radii: vec![1.0, 3.0, 10.0, 30.0, 100.0],
            t_fractions: vec![0.003, 0.01, 0.03, 0.1],
        }
    }

    /// Reduced grid: every other learning rate from 1 down to 0.5⁶, the radii
    /// 1 and 10, and restart intervals 0.01R and 0.1R.
    pub fn fast() -> Self {
        Self {
            etas: (0..4).map(|i| 0.5f64.powi(2 * i)).collect(),
            radii: vec![1.0, 10.0],
            t_fractions: vec![0.01, 0.1],
        }
    }

    /// Restart intervals for `rounds`, rounded and clamped to `[1, R]`, deduplicated.
    pub fn restart_intervals(&self, rounds: u64) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .t_fractions
            .iter()
            .map(|f| ((f * rounds as f64).round() as u64).clamp(1, rounds))
            .collect();
        out.dedup();
        out
    }

    /// Grid points in documented order (radii ascending, then `T` ascending).
    pub fn points(&self, uses_c1: bool, uses_c2: bool, uses_t: bool, rounds: u64) -> Vec<GridPoint> {
        let opt = |used: bool| -> Vec<Option<f64>> {
            if used {
                self.radii.iter().map(|&r| Some(r)).collect()
            } else {
                vec![None]
            }
        };
        let ts: Vec<Option<u64>> = if uses_t {
            self.restart_intervals(rounds).into_iter().map(Some).collect()
        } else {
            vec![None]
        };
        let mut points = Vec::new();
        for &c1 in &opt(uses_c1) {
            for &c2 in &opt(uses_c2) {
                for &t in &ts {
                    points.push(GridPoint {
                        c1,
                        c2,
                        restart_interval: t,
                    });
                }
            }
        }
        points
    }
}

/// Patience counter over train-loss checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patience {
    pub best: f64,
    pub count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbandonReason {
    NonFinite,
    Patience,
}

impl Default for Patience {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            count: 0,
        }
    }
}

impl Patience {
    /// Feed one train-loss check; `Some` means the learning rate is abandoned.
    pub fn observe(&mut self, loss: f64) -> Option<AbandonReason> {
        if !loss.is_finite() {
            return Some(AbandonReason::NonFinite);
        }
        if loss > PATIENCE_FACTOR * self.best {
            self.count += 1;
        } else if loss < self.best {
            self.count = 0;
        }
        self.best = self.best.min(loss);
        (self.count >= PATIENCE_LIMIT).then_some(AbandonReason::Patience)
    }
}

/// What a trial run reports back to the tuner.
#[derive(Clone, Debug)]
pub struct Trial<T> {
    pub completed: bool,
    pub records: Vec<RoundRecord>,
    pub payload: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub point: GridPoint,
    pub eta: f64,
    pub completed: bool,
    /// Round of the check that abandoned the run, if any.
    pub abandoned_at: Option<u64>,
    pub reason: Option<AbandonReason>,
}

#[derive(Clone, Debug)]
pub struct Candidate<T> {
    pub point: GridPoint,
    pub eta: f64,
    pub min_train_loss: f64,
    pub min_train_sq_grad_norm: f64,
    pub records: Vec<RoundRecord>,
    pub payload: T,
}

#[derive(Clone, Debug)]
pub struct TuningReport<T> {
    pub attempts: Vec<Attempt>,
    pub candidates: Vec<Candidate<T>>,
    pub best_train_loss: usize,
    pub best_grad_norm: usize,
}

impl<T> TuningReport<T> {
    pub fn train_winner(&self) -> &Candidate<T> {
        &self.candidates[self.best_train_loss]
    }

    pub fn grad_winner(&self) -> &Candidate<T> {
        &self.candidates[self.best_grad_norm]
    }
}

fn min_of(records: &[RoundRecord], f: impl Fn(&RoundRecord) -> f64) -> f64 {
    records.iter().map(f).fold(f64::INFINITY, f64::min)
}

/// Run the tuning protocol. `run(point, eta, observer)` must execute one trial,
/// passing every record to `observer` and stopping when it breaks.
pub fn tune<T, F>(points: &[GridPoint], etas: &[f64], check_every: u64, mut run: F) -> Result<TuningReport<T>, TuningError>
where
    F: FnMut(&GridPoint, f64, &mut dyn FnMut(&RoundRecord) -> ControlFlow<()>) -> Trial<T>,
{
    if points.is_empty() || etas.is_empty() {
        return Err(TuningError::EmptyGrid);
    }
    let mut attempts = Vec::new();
    let mut candidates: Vec<Candidate<T>> = Vec::new();
    for point in points {
        for &eta in etas {
            let mut patience = Patience::default();
            let mut abandoned: Option<(u64, AbandonReason)> = None;
            let mut observer = |rec: &RoundRecord| {
                if check_every == 0 || !rec.round.is_multiple_of(check_every) {
                    if !rec.train_loss.is_finite() {
                        abandoned = Some((rec.round, AbandonReason::NonFinite));
                        return ControlFlow::Break(());
                    }
                    return ControlFlow::Continue(());
                }
                match patience.observe(rec.train_loss) {
                    Some(reason) => {
                        abandoned = Some((rec.round, reason));
                        ControlFlow::Break(())
                    }
                    None => ControlFlow::Continue(()),
                }
            };
            let trial = run(point, eta, &mut observer);
            // a check that fires on the last round does not undo a completed run
            let completed = trial.completed;
            let (abandoned_at, reason) = match (completed, abandoned) {
                (true, _) => (None, None),
                (false, Some((round, reason))) => (Some(round), Some(reason)),
                (false, None) => (trial.records.last().map(|r| r.round), Some(AbandonReason::NonFinite)),
            };
            attempts.push(Attempt {
                point: *point,
                eta,
                completed,
                abandoned_at,
                reason,
            });
            if completed {
                candidates.push(Candidate {
                    point: *point,
                    eta,
                    min_train_loss: min_of(&trial.records, |r| r.train_loss),
                    min_train_sq_grad_norm: min_of(&trial.records, |r| r.train_sq_grad_norm),
                    records: trial.records,
                    payload: trial.payload,
                });
                break;
            }
        }
    }
    if candidates.is_empty() {
        return Err(TuningError::NothingCompleted {
            attempts: attempts.len(),
        });
    }
    let argmin = |f: &dyn Fn(&Candidate<T>) -> f64| {
        let mut best = 0;
        for (i, c) in candidates.iter().enumerate() {
            if f(c) < f(&candidates[best]) {
                best = i;
            }
        }
        best
    };
    let best_train_loss = argmin(&|c| c.min_train_loss);
    let best_grad_norm = argmin(&|c| c.min_train_sq_grad_norm);
    Ok(TuningReport {
        attempts,
        candidates,
        best_train_loss,
        best_grad_norm,
    })
}
