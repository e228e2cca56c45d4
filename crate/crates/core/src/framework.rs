//! The DIFF2 round loop: clipped client messages, server-side aggregation with
//! Gaussian noise, and the GD / BVR-L-SGD update routines.
//!
//! Round `r` (1-based) is a restart round iff `(r − 1) mod T == 0`. On restart
//! rounds clients send clipped means of per-sample gradients at `x_{r−1}`;
//! otherwise clipped means of per-sample gradient differences between
//! `x_{r−1}` and `x_{r−2}` at radius `C₂‖x_{r−1} − x_{r−2}‖`.
//!
//! Random streams for a run hang off one root: round `r` uses
//! `run/("round", r)/("noise", 0)` for the server noise and
//! `run/("round", r)/("local", 0)` for the local routine; the randomized
//! output index uses `run/("output", 0)`.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::federation::{select_local_client, ClientShard, CommKind, CommLog, Federation};
use crate::model::{ModelError, ModelSpec, Sample, Workspace};
use crate::numerics::{accumulate_clipped, gaussian_vector, l2_norm, ParamVector, RngStream};

#[derive(Debug, Error, PartialEq)]
pub enum FrameworkError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("clipped mean of an empty set")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("a difference message needs x_(r-2)")]
    MissingPrevious,
    #[error("messages disagree on kind or radius")]
    InconsistentMessages,
    #[error("minibatch of {batch} exceeds shard size {shard}")]
    BatchTooLarge { batch: usize, shard: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Routine {
    Gd,
    BvrLsgd { local_steps: usize, batch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diff2Config {
    pub rounds: u64,
    pub restart_interval: u64,
    pub eta: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Noise multipliers: the noise std is `σ · C` for the radius `C` in force.
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub routine: Routine,
}

impl Diff2Config {
    /// Plain DIFF2-GD configuration with the BVR-only fields unused.
    pub fn gd(rounds: u64, restart_interval: u64, eta: f64, c1: f64, c2: f64, sigma1: f64, sigma2: f64) -> Self {
        Self {
            rounds,
            restart_interval,
            eta,
            c1,
            c2,
            c3: 1.0,
            sigma1,
            sigma2,
            sigma3: 0.0,
            routine: Routine::Gd,
        }
    }

    pub fn validate(&self) -> Result<(), FrameworkError> {
        let bad = |m: String| Err(FrameworkError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if self.restart_interval == 0 || self.restart_interval > self.rounds {
            return bad(format!("restart interval {} not in [1, {}]", self.restart_interval, self.rounds));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        for (name, c) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !(c > 0.0) {
                return bad(format!("{name} must be positive, got {c}"));
            }
        }
        for (name, s) in [("sigma1", self.sigma1), ("sigma2", self.sigma2), ("sigma3", self.sigma3)] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {s}"));
            }
        }
        if let Routine::BvrLsgd { local_steps, batch } = self.routine {
            if local_steps == 0 || batch == 0 {
                return bad("local_steps and batch must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn is_restart(&self, round: u64) -> bool {
        is_restart_round(round, self.restart_interval)
    }
}

pub fn is_restart_round(round: u64, interval: u64) -> bool {
    (round - 1).is_multiple_of(interval)
}

/// Noise std `σ · C`, defined as zero when `σ = 0` even if `C` is infinite.
fn noise_std(sigma: f64, radius: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Gradient,
    Difference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundMessage {
    pub client_id: usize,
    pub vector: ParamVector,
    pub kind: MessageKind,
    pub radius_used: f64,
}

/// Server-side estimator state between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub v_tilde: ParamVector,
    pub x_prev: ParamVector,
    pub x_prev2: Option<ParamVector>,
    pub round: u64,
    pub last_restart: u64,
}

/// Mean of the vectors after clipping each to norm `radius`.
pub fn clipped_mean(vectors: &[ParamVector], radius: f64) -> Result<ParamVector, FrameworkError> {
    let first = vectors.first().ok_or(FrameworkError::Empty)?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != first.len() {
            return Err(FrameworkError::Config("vectors differ in dimension".into()));
        }
        accumulate_clipped(&mut acc, v.as_slice(), radius);
    }
    Ok(ParamVector::from_vec(acc).mean_of_sum(vectors.len()))
}

/// Clipped mean over rows of `new` (or of `new − old` row by row).
fn clipped_mean_rows(new: &[f64], old: Option<&[f64]>, dim: usize, radius: f64) -> ParamVector {
    let rows = new.len() / dim;
    let mut acc = vec![0.0; dim];
    let mut diff = vec![0.0; dim];
    for i in 0..rows {
        let row = &new[i * dim..(i + 1) * dim];
        match old {
            Some(old) => {
                for ((d, a), b) in diff.iter_mut().zip(row).zip(&old[i * dim..(i + 1) * dim]) {
                    *d = a - b;
                }
                accumulate_clipped(&mut acc, &diff, radius);
            }
            None => accumulate_clipped(&mut acc, row, radius),
        }
    }
    ParamVector::from_vec(acc).mean_of_sum(rows)
}

/// Per-sample gradients of `samples` at `x`, row-major into `out`; returns the loss sum.
fn per_sample_rows(spec: &ModelSpec, samples: &[&Sample], x: &[f64], out: &mut Vec<f64>, ws: &mut Workspace) -> f64 {
    let d = x.len();
    out.resize(samples.len() * d, 0.0);
    let mut loss = 0.0;
    for (z, row) in samples.iter().zip(out.chunks_exact_mut(d)) {
        loss += spec.loss_and_gradient_unchecked(x, z, row, ws);
    }
    loss
}

fn check_samples(spec: &ModelSpec, x: &ParamVector, samples: &[Sample]) -> Result<(), FrameworkError> {
    for z in samples {
        spec.check(x.as_slice(), z)?;
    }
    Ok(())
}

/// Client `p`'s message for one round.
///
/// `x_curr` is `x_{r−1}` and `x_prev` is `x_{r−2}`.
pub fn local_message(
    spec: &ModelSpec,
    shard: &ClientShard,
    x_curr: &ParamVector,
    x_prev: Option<&ParamVector>,
    is_restart: bool,
    c1: f64,
    c2: f64,
) -> Result<RoundMessage, FrameworkError> {
    check_samples(spec, x_curr, &shard.samples)?;
    let refs: Vec<&Sample> = shard.samples.iter().collect();
    let mut ws = spec.workspace();
    let d = x_curr.len();
    let mut new = Vec::new();
    per_sample_rows(spec, &refs, x_curr.as_slice(), &mut new, &mut ws);
    if is_restart {
        return Ok(RoundMessage {
            client_id: shard.client_id,
            vector: clipped_mean_rows(&new, None, d, c1),
            kind: MessageKind::Gradient,
            radius_used: c1,
        });
    }
    let x_prev = x_prev.ok_or(FrameworkError::MissingPrevious)?;
    let radius = c2 * x_curr.sub(x_prev).norm();
    let mut old = Vec::new();
    per_sample_rows(spec, &refs, x_prev.as_slice(), &mut old, &mut ws);
    Ok(RoundMessage {
        client_id: shard.client_id,
        vector: clipped_mean_rows(&new, Some(&old), d, radius),
        kind: MessageKind::Difference,
        radius_used: radius,
    })
}

/// Output of [`aggregate_and_privatize`]; `noise` is the `ξ_r` that was added.
#[derive(Clone, Debug, PartialEq)]
pub struct Privatized {
    pub v_tilde: ParamVector,
    pub noise: ParamVector,
}

/// `ṽ_r = (1/P)Σ d_r^{(p)} + ṽ_{r−1} + N(0, σ²C²I)`, with `ṽ_{r−1}` taken as
/// zero when `prev` is `None` (a restart round).
pub fn aggregate_and_privatize(
    messages: &[RoundMessage],
    prev: Option<&ParamVector>,
    sigma: f64,
    stream: &RngStream,
) -> Result<Privatized, FrameworkError> {
    let first = messages.first().ok_or(FrameworkError::Empty)?;
    let expected_kind = if prev.is_none() {
        MessageKind::Gradient
    } else {
        MessageKind::Difference
    };
    if messages
        .iter()
        .any(|m| m.kind != expected_kind || m.radius_used.to_bits() != first.radius_used.to_bits())
    {
        return Err(FrameworkError::InconsistentMessages);
    }
    let d = first.vector.len();
    let mut sum = vec![0.0; d];
    for m in messages {
        for (s, v) in sum.iter_mut().zip(m.vector.iter()) {
            *s += v;
        }
    }
    let mut v = ParamVector::from_vec(sum).mean_of_sum(messages.len());
    if let Some(prev) = prev {
        v.add_assign(prev);
    }
    let noise = gaussian_vector(noise_std(sigma, first.radius_used), d, stream);
    v.add_assign(&noise);
    Ok(Privatized { v_tilde: v, noise })
}

/// `x_r = x_{r−1} − η ṽ_r`, returned as both the next iterate and the round output.
pub fn gd_routine(x_prev: &ParamVector, v_tilde: &ParamVector, eta: f64) -> (ParamVector, ParamVector) {
    let x = x_prev.step(eta, v_tilde);
    (x.clone(), x)
}

/// Clipped mean of per-sample gradient differences over the minibatch `idx`,
/// at radius `c3 · ‖x_{k−1} − x_{k−2}‖`. Returns the message and the radius.
pub fn local_step_message(
    spec: &ModelSpec,
    shard: &ClientShard,
    idx: &[usize],
    x_km1: &ParamVector,
    x_km2: &ParamVector,
    c3: f64,
) -> Result<(ParamVector, f64), FrameworkError> {
    check_samples(spec, x_km1, &shard.samples)?;
    let batch: Vec<&Sample> = idx.iter().map(|&i| &shard.samples[i]).collect();
    Ok(local_step_message_unchecked(spec, &batch, x_km1, x_km2, c3, &mut spec.workspace()))
}

fn local_step_message_unchecked(
    spec: &ModelSpec,
    batch: &[&Sample],
    x_km1: &ParamVector,
    x_km2: &ParamVector,
    c3: f64,
    ws: &mut Workspace,
) -> (ParamVector, f64) {
    let radius = c3 * x_km1.sub(x_km2).norm();
    let (mut new, mut old) = (Vec::new(), Vec::new());
    per_sample_rows(spec, batch, x_km1.as_slice(), &mut new, ws);
    per_sample_rows(spec, batch, x_km2.as_slice(), &mut old, ws);
    (clipped_mean_rows(&new, Some(&old), x_km1.len(), radius), radius)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalParams {
    pub eta: f64,
    pub batch: usize,
    pub sigma3: f64,
    pub c3: f64,
    pub local_steps: usize,
}

/// Local bias-variance-reduced SGD on one client. Returns `(x_K, x_{k̂−1})`
/// with `k̂` uniform on `1..=K`.
///
/// Step `k` draws its minibatch from `stream/("minibatch", k)` and its noise
/// from `stream/("noise", k)`; `k̂` comes from `stream/("khat", 0)`.
pub fn bvr_lsgd_routine(
    spec: &ModelSpec,
    x0: &ParamVector,
    v1_tilde: &ParamVector,
    params: &LocalParams,
    shard: &ClientShard,
    stream: &RngStream,
) -> Result<(ParamVector, ParamVector), FrameworkError> {
    if params.batch > shard.len() {
        return Err(FrameworkError::BatchTooLarge {
            batch: params.batch,
            shard: shard.len(),
        });
    }
    if params.local_steps == 0 || params.batch == 0 {
        return Err(FrameworkError::Config("local_steps and batch must be at least 1".into()));
    }
    check_samples(spec, x0, &shard.samples)?;
    let mut ws = spec.workspace();
    let mut iterates = Vec::with_capacity(params.local_steps + 1);
    iterates.push(x0.clone());
    iterates.push(x0.step(params.eta, v1_tilde));
    let mut v_tilde = v1_tilde.clone();
    for k in 2..=params.local_steps {
        let idx = stream
            .derive("minibatch", k as u64)
            .rng()
            .sample_without_replacement(shard.len(), params.batch);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &shard.samples[i]).collect();
        let (msg, radius) =
            local_step_message_unchecked(spec, &batch, &iterates[k - 1], &iterates[k - 2], params.c3, &mut ws);
        v_tilde.add_assign(&msg);
        let noise = gaussian_vector(
            noise_std(params.sigma3, radius),
            x0.len(),
            &stream.derive("noise", k as u64),
        );
        v_tilde.add_assign(&noise);
        let next = iterates[k - 1].step(params.eta, &v_tilde);
        iterates.push(next);
    }
    let k_hat = 1 + stream.derive("khat", 0).rng().below(params.local_steps as u64) as usize;
    Ok((iterates[params.local_steps].clone(), iterates[k_hat - 1].clone()))
}

/// Metrics at `x_r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    /// `f(x_r) = (1/P) Σ_p f_p(x_r)`.
    pub train_loss: f64,
    /// `‖∇f(x_r)‖²`, exact over all training shards.
    pub train_sq_grad_norm: f64,
    pub test_loss: Option<f64>,
}

/// Which rounds get a [`RoundRecord`] and what test set to score.
#[derive(Clone, Copy, Debug)]
pub struct Monitor<'a> {
    /// Records are produced for rounds that are multiples of `stride` and for round `R`.
    pub stride: u64,
    pub test: Option<&'a [Sample]>,
}

impl Monitor<'_> {
    pub fn every_round() -> Self {
        Self { stride: 1, test: None }
    }

    fn wants(&self, round: u64, rounds: u64) -> bool {
        round == rounds || round.is_multiple_of(self.stride.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "round")]
pub enum RunStatus {
    Completed,
    /// The observer asked to stop after this round.
    Stopped(u64),
    /// The loss or iterate at this round was not finite.
    Diverged(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    /// `x_0, …, x_R` (shorter when the run stopped early).
    pub trajectory: Vec<ParamVector>,
    /// Per-round candidate outputs, index 0 holding `x_0`.
    pub outputs: Vec<ParamVector>,
    /// `r̂ ~ Unif[R]`; only drawn for completed runs.
    pub r_hat: Option<u64>,
    /// `x_{r̂−1}^{out}`.
    pub x_out: Option<ParamVector>,
    pub records: Vec<RoundRecord>,
    pub status: RunStatus,
    pub comm: CommLog,
}

/// What a client computes alongside its per-sample gradients.
#[derive(Clone, Copy, Debug)]
enum Clip {
    /// Clipped mean of gradients at this radius.
    Gradient(f64),
    /// Clipped mean of gradient differences against the previous evaluation.
    Difference(f64),
    /// Metrics only.
    None,
}

struct ClientState {
    /// Per-sample gradients from the latest evaluation, row-major.
    rows: Vec<f64>,
    scratch: Vec<f64>,
    diff: Vec<f64>,
    clipped_sum: Vec<f64>,
    loss_sum: f64,
    grad_sum: Vec<f64>,
    ws: Workspace,
}

impl ClientState {
    fn new(spec: &ModelSpec) -> Self {
        let d = spec.param_count();
        Self {
            rows: Vec::new(),
            scratch: vec![0.0; d],
            diff: vec![0.0; d],
            clipped_sum: vec![0.0; d],
            loss_sum: 0.0,
            grad_sum: vec![0.0; d],
            ws: spec.workspace(),
        }
    }

    /// One pass over the shard at `x`: loss and gradient sums, the clipped sum
    /// requested by `clip`, and (when `keep`) the rows for the next difference.
    fn evaluate(&mut self, spec: &ModelSpec, shard: &ClientShard, x: &[f64], clip: Clip, keep: bool) {
        let d = x.len();
        if keep {
            self.rows.resize(shard.len() * d, 0.0);
        }
        self.loss_sum = 0.0;
        self.grad_sum.iter_mut().for_each(|g| *g = 0.0);
        self.clipped_sum.iter_mut().for_each(|g| *g = 0.0);
        for (i, z) in shard.samples.iter().enumerate() {
            self.loss_sum += spec.loss_and_gradient_unchecked(x, z, &mut self.scratch, &mut self.ws);
            for (g, v) in self.grad_sum.iter_mut().zip(&self.scratch) {
                *g += v;
            }
            match clip {
                Clip::Gradient(c) => accumulate_clipped(&mut self.clipped_sum, &self.scratch, c),
                Clip::Difference(c) => {
                    let old = &self.rows[i * d..(i + 1) * d];
                    for ((t, a), b) in self.diff.iter_mut().zip(&self.scratch).zip(old) {
                        *t = a - b;
                    }
                    accumulate_clipped(&mut self.clipped_sum, &self.diff, c);
                }
                Clip::None => {}
            }
            if keep {
                self.rows[i * d..(i + 1) * d].copy_from_slice(&self.scratch);
            }
        }
    }
}

fn for_each_client<F>(states: &mut [ClientState], shards: &[ClientShard], f: F)
where
    F: Fn(&mut ClientState, &ClientShard) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        states.par_iter_mut().zip(shards.par_iter()).for_each(|(s, c)| f(s, c));
    }
    #[cfg(not(feature = "parallel"))]
    states.iter_mut().zip(shards).for_each(|(s, c)| f(s, c));
}

fn train_metrics(states: &[ClientState], shards: &[ClientShard]) -> (f64, f64) {
    let p = states.len() as f64;
    let d = states[0].grad_sum.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for (s, shard) in states.iter().zip(shards) {
        let n = shard.len() as f64;
        loss += s.loss_sum / n;
        for (g, v) in grad.iter_mut().zip(&s.grad_sum) {
            *g += v / n;
        }
    }
    let norm = l2_norm(&grad) / p;
    (loss / p, norm * norm)
}

fn test_loss(spec: &ModelSpec, x: &[f64], test: &[Sample]) -> f64 {
    let mut ws = spec.workspace();
    test.iter().map(|z| spec.loss_unchecked(x, z, &mut ws)).sum::<f64>() / test.len() as f64
}

/// Shared driver for DIFF2 and the DP-GD baseline.
struct Driver<'a> {
    spec: &'a ModelSpec,
    federation: &'a Federation,
    monitor: Monitor<'a>,
    rounds: u64,
    states: Vec<ClientState>,
    records: Vec<RoundRecord>,
}

impl<'a> Driver<'a> {
    fn new(spec: &'a ModelSpec, federation: &'a Federation, x0: &ParamVector, monitor: Monitor<'a>, rounds: u64) -> Result<Self, FrameworkError> {
        if federation.clients() == 0 {
            return Err(FrameworkError::Config("empty federation".into()));
        }
        for shard in federation.shards() {
            check_samples(spec, x0, &shard.samples)?;
        }
        if let Some(test) = monitor.test {
            check_samples(spec, x0, test)?;
            if test.is_empty() {
                return Err(FrameworkError::Config("empty test set".into()));
            }
        }
        Ok(Self {
            spec,
            federation,
            monitor,
            rounds,
            states: (0..federation.clients()).map(|_| ClientState::new(spec)).collect(),
            records: Vec::new(),
        })
    }

    /// Evaluate every client at `x`; `keep` retains per-sample rows for a
    /// following difference round.
    fn evaluate(&mut self, x: &ParamVector, clip: Clip, keep: bool) {
        let spec = self.spec;
        for_each_client(&mut self.states, self.federation.shards(), |s, shard| {
            s.evaluate(spec, shard, x.as_slice(), clip, keep)
        });
    }

    /// Record metrics for `x` as round `round` using the gradients last evaluated.
    fn record<O>(&mut self, round: u64, x: &ParamVector, observer: &mut O) -> Result<(), RunStatus>
    where
        O: FnMut(&RoundRecord) -> ControlFlow<()>,
    {
        let (train_loss, train_sq_grad_norm) = train_metrics(&self.states, self.federation.shards());
        if !train_loss.is_finite() || !train_sq_grad_norm.is_finite() {
            return Err(RunStatus::Diverged(round));
        }
        if round == 0 || !self.monitor.wants(round, self.rounds) {
            return Ok(());
        }
        let record = RoundRecord {
            round,
            train_loss,
            train_sq_grad_norm,
            test_loss: self.monitor.test.map(|t| test_loss(self.spec, x.as_slice(), t)),
        };
        self.records.push(record);
        match observer(&record) {
            ControlFlow::Continue(()) => Ok(()),
            ControlFlow::Break(()) => Err(RunStatus::Stopped(round)),
        }
    }

    /// Messages from the clipped sums of the last evaluation.
    fn messages(&self, restart: bool, radius: f64) -> Vec<RoundMessage> {
        self.states
            .iter()
            .zip(self.federation.shards())
            .map(|(s, shard)| RoundMessage {
                client_id: shard.client_id,
                vector: ParamVector::from_vec(s.clipped_sum.clone()).mean_of_sum(shard.len()),
                kind: if restart {
                    MessageKind::Gradient
                } else {
                    MessageKind::Difference
                },
                radius_used: radius,
            })
            .collect()
    }
}

fn finish(
    run: &RngStream,
    rounds: u64,
    trajectory: Vec<ParamVector>,
    outputs: Vec<ParamVector>,
    records: Vec<RoundRecord>,
    status: RunStatus,
    comm: CommLog,
) -> RunOutput {
    let (r_hat, x_out) = if status == RunStatus::Completed {
        let r_hat = 1 + run.derive("output", 0).rng().below(rounds);
        (Some(r_hat), Some(outputs[(r_hat - 1) as usize].clone()))
    } else {
        (None, None)
    };
    RunOutput {
        trajectory,
        outputs,
        r_hat,
        x_out,
        records,
        status,
        comm,
    }
}

/// Run DIFF2 for `config.rounds` rounds from `x0`.
///
/// `observer` sees every [`RoundRecord`] the monitor asks for and may stop the
/// run by returning `ControlFlow::Break`.
pub fn run_diff2<O>(
    config: &Diff2Config,
    federation: &Federation,
    spec: &ModelSpec,
    x0: &ParamVector,
    run: &RngStream,
    monitor: Monitor<'_>,
    mut observer: O,
) -> Result<RunOutput, FrameworkError>
where
    O: FnMut(&RoundRecord) -> ControlFlow<()>,
{
    config.validate()?;
    if let Routine::BvrLsgd { batch, .. } = config.routine {
        if batch > federation.n_min() {
            return Err(FrameworkError::BatchTooLarge {
                batch,
                shard: federation.n_min(),
            });
        }
    }
    let mut driver = Driver::new(spec, federation, x0, monitor, config.rounds)?;
    let mut trajectory = vec![x0.clone()];
    let mut outputs = vec![x0.clone()];
    let mut comm = CommLog::default();
    let mut state: Option<EstimatorState> = None;
    let mut status = RunStatus::Completed;

    // rows are only needed when some later round is a difference round
    let keep = config.restart_interval > 1;
    for r in 1..=config.rounds {
        let x_curr = trajectory[(r - 1) as usize].clone();
        let restart = config.is_restart(r);
        let radius = if restart {
            config.c1
        } else {
            let st = state.as_ref().expect("state exists after the first round");
            let x_prev2 = st.x_prev2.as_ref().ok_or(FrameworkError::MissingPrevious)?;
            config.c2 * x_curr.sub(x_prev2).norm()
        };
        driver.evaluate(&x_curr, if restart { Clip::Gradient(radius) } else { Clip::Difference(radius) }, keep);
        if let Err(s) = driver.record(r - 1, &x_curr, &mut observer) {
            status = s;
            break;
        }

        let round_stream = run.derive("round", r);
        let messages = driver.messages(restart, radius);
        let privatized = if restart {
            aggregate_and_privatize(&messages, None, config.sigma1, &round_stream.derive("noise", 0))?
        } else {
            let st = state.as_ref().expect("state exists after the first round");
            aggregate_and_privatize(&messages, Some(&st.v_tilde), config.sigma2, &round_stream.derive("noise", 0))?
        };

        let (x_next, x_out) = match config.routine {
            Routine::Gd => {
                comm.log_round(r, CommKind::Gd, federation.clients());
                gd_routine(&x_curr, &privatized.v_tilde, config.eta)
            }
            Routine::BvrLsgd { local_steps, batch } => {
                comm.log_round(r, CommKind::BvrLsgd, federation.clients());
                let p = select_local_client(r, federation.clients());
                let local = LocalParams {
                    eta: config.eta,
                    batch,
                    sigma3: config.sigma3,
                    c3: config.c3,
                    local_steps,
                };
                bvr_lsgd_routine(
                    spec,
                    &x_curr,
                    &privatized.v_tilde,
                    &local,
                    federation.shard(p),
                    &round_stream.derive("local", 0),
                )?
            }
        };

        let last_restart = if restart {
            r
        } else {
            state.as_ref().map_or(r, |s| s.last_restart)
        };
        state = Some(EstimatorState {
            v_tilde: privatized.v_tilde,
            x_prev: x_next.clone(),
            x_prev2: Some(x_curr),
            round: r,
            last_restart,
        });
        let finite = x_next.is_finite();
        trajectory.push(x_next);
        outputs.push(x_out);
        if !finite {
            status = RunStatus::Diverged(r);
            break;
        }
    }

    if status == RunStatus::Completed {
        let x_last = trajectory.last().unwrap().clone();
        driver.evaluate(&x_last, Clip::None, false);
        if let Err(s) = driver.record(config.rounds, &x_last, &mut observer) {
            // stopping after the final record still counts as a completed run
            if let RunStatus::Diverged(_) = s {
                status = s;
            }
        }
    }
    Ok(finish(run, config.rounds, trajectory, outputs, driver.records, status, comm))
}

/// DP-GD baseline: every round clients send clipped gradient means at
/// radius `c1` and the server adds `N(0, σ²c1²I)` before a gradient step.
/// With `σ = 0` and `c1 = ∞` this is plain full-batch GD on `(1/P)Σ f_p`.
#[allow(clippy::too_many_arguments)]
pub fn run_dp_gd<O>(
    rounds: u64,
    eta: f64,
    c1: f64,
    sigma: f64,
    federation: &Federation,
    spec: &ModelSpec,
    x0: &ParamVector,
    run: &RngStream,
    monitor: Monitor<'_>,
    mut observer: O,
) -> Result<RunOutput, FrameworkError>
where
    O: FnMut(&RoundRecord) -> ControlFlow<()>,
{
    Diff2Config::gd(rounds, 1, eta, c1, 1.0, sigma, 0.0).validate()?;
    let mut driver = Driver::new(spec, federation, x0, monitor, rounds)?;
    let mut trajectory = vec![x0.clone()];
    let mut comm = CommLog::default();
    let mut status = RunStatus::Completed;
    for r in 1..=rounds {
        let x = trajectory[(r - 1) as usize].clone();
        driver.evaluate(&x, Clip::Gradient(c1), false);
        if let Err(s) = driver.record(r - 1, &x, &mut observer) {
            status = s;
            break;
        }
        let messages = driver.messages(true, c1);
        let noisy = aggregate_and_privatize(&messages, None, sigma, &run.derive("round", r).derive("noise", 0))?;
        comm.log_round(r, CommKind::Gd, federation.clients());
        let next = x.step(eta, &noisy.v_tilde);
        let finite = next.is_finite();
        trajectory.push(next);
        if !finite {
            status = RunStatus::Diverged(r);
            break;
        }
    }
    if status == RunStatus::Completed {
        let x_last = trajectory.last().unwrap().clone();
        driver.evaluate(&x_last, Clip::None, false);
        if let Err(RunStatus::Diverged(r)) = driver.record(rounds, &x_last, &mut observer) {
            status = RunStatus::Diverged(r);
        }
    }
    let outputs = trajectory.clone();
    Ok(finish(run, rounds, trajectory, outputs, driver.records, status, comm))
}
