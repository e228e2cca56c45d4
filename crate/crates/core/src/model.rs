//! One-hidden-layer softplus MLP with squared or cross-entropy loss.
//!
//! Parameters are stored flat as `[W1 (hidden × in, row-major), b1, W2 (out × hidden), b2]`.
//! Squared loss is `(ŷ − y)²` without a ½ factor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{ParamVector, RngStream};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected} {what}, got {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("target kind does not match the loss")]
    TargetKind,
    #[error("class index {class} out of range for {classes} outputs")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty sample set")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub output_dim: usize,
    pub loss: LossKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Value(f64),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: Target,
}

impl Sample {
    pub fn regression(features: Vec<f64>, target: f64) -> Self {
        Self {
            features,
            target: Target::Value(target),
        }
    }

    pub fn classification(features: Vec<f64>, class: usize) -> Self {
        Self {
            features,
            target: Target::Class(class),
        }
    }
}

/// `softplus(t) = max(t, 0) + ln(1 + e^{−|t|})`, finite for any finite `t`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Derivative of softplus.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Reusable buffers for the forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    /// `σ(pre-activation)`, filled only when a gradient is requested.
    slope: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl ModelSpec {
    pub fn regression(input_dim: usize, hidden_units: usize) -> Self {
        Self {
            input_dim,
            hidden_units,
            output_dim: 1,
            loss: LossKind::Squared,
        }
    }

    pub fn classification(input_dim: usize, hidden_units: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden_units,
            output_dim: classes,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_units + self.hidden_units + self.hidden_units * self.output_dim + self.output_dim
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.input_dim * self.hidden_units;
        let w2 = b1 + self.hidden_units;
        let b2 = w2 + self.hidden_units * self.output_dim;
        (b1, w2, b2)
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            slope: vec![0.0; self.hidden_units],
            hidden: vec![0.0; self.hidden_units],
            out: vec![0.0; self.output_dim],
        }
    }

    /// Check that `params` and `z` fit this architecture and loss.
    pub fn check(&self, params: &[f64], z: &Sample) -> Result<(), ModelError> {
        if params.len() != self.param_count() {
            return Err(ModelError::Dimension {
                what: "parameters",
                expected: self.param_count(),
                found: params.len(),
            });
        }
        if z.features.len() != self.input_dim {
            return Err(ModelError::Dimension {
                what: "features",
                expected: self.input_dim,
                found: z.features.len(),
            });
        }
        match (self.loss, z.target) {
            (LossKind::Squared, Target::Value(_)) if self.output_dim == 1 => Ok(()),
            (LossKind::CrossEntropy, Target::Class(c)) if c < self.output_dim => Ok(()),
            (LossKind::CrossEntropy, Target::Class(c)) => Err(ModelError::ClassOutOfRange {
                class: c,
                classes: self.output_dim,
            }),
            _ => Err(ModelError::TargetKind),
        }
    }

    fn forward(&self, params: &[f64], x: &[f64], ws: &mut Workspace, slopes: bool) {
        let (b1, w2, b2) = self.offsets();
        let n_in = self.input_dim;
        for j in 0..self.hidden_units {
            let row = &params[j * n_in..(j + 1) * n_in];
            let mut acc = params[b1 + j];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            // one exponential serves both softplus and its derivative
            let e = (-acc.abs()).exp();
            ws.hidden[j] = acc.max(0.0) + e.ln_1p();
            if slopes {
                ws.slope[j] = if acc >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            }
        }
        let h = self.hidden_units;
        for k in 0..self.output_dim {
            let row = &params[w2 + k * h..w2 + (k + 1) * h];
            let mut acc = params[b2 + k];
            for (w, hj) in row.iter().zip(&ws.hidden) {
                acc += w * hj;
            }
            ws.out[k] = acc;
        }
    }

    /// Loss from the output layer in `ws.out`; when `grad_out` is set, it also
    /// overwrites `ws.out` with `∂ℓ/∂out`.
    fn head(&self, target: Target, ws: &mut Workspace, grad_out: bool) -> f64 {
        match (self.loss, target) {
            (LossKind::Squared, Target::Value(y)) => {
                let r = ws.out[0] - y;
                if grad_out {
                    ws.out[0] = 2.0 * r;
                }
                r * r
            }
            (LossKind::CrossEntropy, Target::Class(c)) => {
                let max = ws.out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = ws.out.iter().map(|o| (o - max).exp()).sum();
                let lse = max + sum.ln();
                let loss = lse - ws.out[c];
                if grad_out {
                    for (k, o) in ws.out.iter_mut().enumerate() {
                        *o = (*o - lse).exp() - if k == c { 1.0 } else { 0.0 };
                    }
                }
                loss.max(0.0)
            }
            _ => unreachable!("checked by ModelSpec::check"),
        }
    }

    /// Loss without validation; callers must have run [`ModelSpec::check`].
    pub fn loss_unchecked(&self, params: &[f64], z: &Sample, ws: &mut Workspace) -> f64 {
        self.forward(params, &z.features, ws, false);
        self.head(z.target, ws, false)
    }

    /// Writes `∇ℓ(params, z)` into `grad` (overwriting it) and returns the loss.
    /// No validation; callers must have run [`ModelSpec::check`].
    pub fn loss_and_gradient_unchecked(&self, params: &[f64], z: &Sample, grad: &mut [f64], ws: &mut Workspace) -> f64 {
        let x = &z.features;
        self.forward(params, x, ws, true);
        let loss = self.head(z.target, ws, true);

        let (b1, w2, b2) = self.offsets();
        let (n_in, h) = (self.input_dim, self.hidden_units);
        for k in 0..self.output_dim {
            let dout = ws.out[k];
            grad[b2 + k] = dout;
            for j in 0..h {
                grad[w2 + k * h + j] = dout * ws.hidden[j];
            }
        }
        for j in 0..h {
            let mut dh = 0.0;
            for k in 0..self.output_dim {
                dh += ws.out[k] * params[w2 + k * h + j];
            }
            let dpre = dh * ws.slope[j];
            grad[b1 + j] = dpre;
            for (g, xi) in grad[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                *g = dpre * xi;
            }
        }
        loss
    }
}

/// Uniform initialization on `[−h, h]` with `h = 1/√w_in`, or `h = √w_in` when
/// `literal_range` is set.
pub fn init_params(spec: &ModelSpec, stream: &RngStream, literal_range: bool) -> ParamVector {
    let w_in = spec.input_dim as f64;
    let half = if literal_range { w_in.sqrt() } else { 1.0 / w_in.sqrt() };
    let mut rng = stream.rng();
    (0..spec.param_count())
        .map(|_| rng.uniform_in(-half, half))
        .collect::<Vec<_>>()
        .into()
}

pub fn per_sample_loss(spec: &ModelSpec, params: &ParamVector, z: &Sample) -> Result<f64, ModelError> {
    spec.check(params.as_slice(), z)?;
    Ok(spec.loss_unchecked(params.as_slice(), z, &mut spec.workspace()))
}

pub fn per_sample_gradient(spec: &ModelSpec, params: &ParamVector, z: &Sample) -> Result<ParamVector, ModelError> {
    spec.check(params.as_slice(), z)?;
    let mut grad = ParamVector::zeros(spec.param_count());
    spec.loss_and_gradient_unchecked(params.as_slice(), z, grad.as_mut_slice(), &mut spec.workspace());
    Ok(grad)
}

/// Mean loss over `samples`.
pub fn mean_loss(spec: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Empty);
    }
    let mut ws = spec.workspace();
    let mut total = 0.0;
    for z in samples {
        spec.check(params.as_slice(), z)?;
        total += spec.loss_unchecked(params.as_slice(), z, &mut ws);
    }
    Ok(total / samples.len() as f64)
}

pub fn batch_mean_gradient(spec: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> Result<ParamVector, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::Empty);
    }
    let d = spec.param_count();
    let mut ws = spec.workspace();
    let mut g = vec![0.0; d];
    let mut acc = ParamVector::zeros(d);
    for z in samples {
        spec.check(params.as_slice(), z)?;
        spec.loss_and_gradient_unchecked(params.as_slice(), z, &mut g, &mut ws);
        for (a, gi) in acc.as_mut_slice().iter_mut().zip(&g) {
            *a += gi;
        }
    }
    Ok(acc.mean_of_sum(samples.len()))
}

/// Central differences `(ℓ(x + h e_i) − ℓ(x − h e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient(spec: &ModelSpec, params: &ParamVector, z: &Sample, step: f64) -> Result<ParamVector, ModelError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    spec.check(params.as_slice(), z)?;
    let mut ws = spec.workspace();
    let mut probe = params.clone().into_vec();
    let mut grad = ParamVector::zeros(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = spec.loss_unchecked(&probe, z, &mut ws);
        probe[i] = orig - step;
        let down = spec.loss_unchecked(&probe, z, &mut ws);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}
