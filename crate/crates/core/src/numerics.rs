//! Vector arithmetic and reproducible randomness shared by every other module.
//!
//! All math is carried out in `f64`. Randomness is organised as a tree of
//! [`RngStream`]s: a stream is identified by a root seed plus a path of
//! `(label, index)` pairs, and the generator for a stream is a ChaCha20 instance
//! keyed by the SHA-256 digest of that identity. Children are derived, never
//! split off a running generator, so the same path always yields the same draws
//! no matter how work is scheduled across threads.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Relative slack under which a vector already counts as inside the clipping ball.
///
/// Without it, rounding in the norm of an already-clipped vector can push it a
/// few ulps past the radius and a second clip would perturb its bits.
pub const CLIP_SLACK: f64 = 1e-12;

/// Flat parameter / gradient vector of fixed dimension.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn norm_sq(&self) -> f64 {
        sum_sq(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "dimension mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "dimension mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn add_assign(&mut self, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self - step * direction`: one descent step.
    pub fn step(&self, step: f64, direction: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), direction.len(), "dimension mismatch");
        ParamVector(
            self.0
                .iter()
                .zip(&direction.0)
                .map(|(x, d)| x - step * d)
                .collect(),
        )
    }

    /// Divide every entry by `count` (the last step of an arithmetic mean).
    pub fn mean_of_sum(mut self, count: usize) -> ParamVector {
        let n = count as f64;
        for v in &mut self.0 {
            *v /= n;
        }
        self
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

fn sum_sq(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum()
}

/// Euclidean norm `sqrt(sum v_i^2)`.
pub fn l2_norm(values: &[f64]) -> f64 {
    sum_sq(values).sqrt()
}

/// Multiplier that maps a vector of norm `norm` into the ball of radius `radius`.
///
/// A zero vector gets factor 1. Vectors within [`CLIP_SLACK`] of the radius are
/// left alone, which makes clipping bitwise idempotent.
pub fn clip_factor(norm: f64, radius: f64) -> f64 {
    if norm <= radius * (1.0 + CLIP_SLACK) {
        1.0
    } else {
        radius / norm
    }
}

/// Rescale `v` by `min{C/‖v‖, 1}`.
pub fn clip_to_radius(v: &ParamVector, radius: f64) -> ParamVector {
    debug_assert!(radius >= 0.0, "clipping radius must be nonnegative");
    let factor = clip_factor(v.norm(), radius);
    if factor == 1.0 {
        v.clone()
    } else {
        v.scaled(factor)
    }
}

/// Add the clipped version of `v` into `acc`.
///
/// This is the single code path used for every clipped mean in the crate, so
/// results computed incrementally and via [`clip_to_radius`] agree bitwise.
pub fn accumulate_clipped(acc: &mut [f64], v: &[f64], radius: f64) {
    debug_assert_eq!(acc.len(), v.len());
    let factor = clip_factor(l2_norm(v), radius);
    if factor == 1.0 {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    } else {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x * factor;
        }
    }
}

/// Identity of a reproducible random stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<(String, u64)>,
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        Self {
            root_seed,
            path: Vec::new(),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[(String, u64)] {
        &self.path
    }

    /// Child stream at `self / (label, index)`.
    pub fn derive(&self, label: &str, index: u64) -> RngStream {
        let mut path = self.path.clone();
        path.push((label.to_owned(), index));
        RngStream {
            root_seed: self.root_seed,
            path,
        }
    }

    /// 32-byte generator key: SHA-256 over the length-prefixed encoding of the
    /// root seed and every path element, so distinct paths get distinct keys.
    fn key(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"diff2-rng-v1");
        hasher.update(self.root_seed.to_le_bytes());
        hasher.update((self.path.len() as u64).to_le_bytes());
        for (label, index) in &self.path {
            hasher.update((label.len() as u64).to_le_bytes());
            hasher.update(label.as_bytes());
            hasher.update(index.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        StreamRng {
            inner: ChaCha20Rng::from_seed(self.key()),
        }
    }
}

/// Generator for one [`RngStream`].
#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: ChaCha20Rng,
}

impl StreamRng {
    /// Uniform draw on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` by rejection on the top bits (no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher-Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n`, uniformly, in draw order.
    ///
    /// Partial Fisher-Yates over an index table.
    pub fn sample_without_replacement(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot draw {count} of {n} without replacement");
        let mut table: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below((n - i) as u64) as usize;
            table.swap(i, j);
        }
        table.truncate(count);
        table
    }

    /// Fill `out` with independent standard normals.
    ///
    /// Box-Muller: each pair of uniforms `(u1, u2)` gives
    /// `sqrt(-2 ln(1-u1)) * (cos 2πu2, sin 2πu2)`. With an odd length the sine
    /// branch of the last pair is discarded.
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_mut(2);
        for chunk in &mut chunks {
            let u1 = 1.0 - self.uniform();
            let u2 = self.uniform();
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = std::f64::consts::TAU * u2;
            chunk[0] = radius * angle.cos();
            if chunk.len() == 2 {
                chunk[1] = radius * angle.sin();
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        let mut one = [0.0];
        self.fill_standard_normal(&mut one);
        one[0]
    }
}

/// `dim` i.i.d. draws from `N(0, std^2)` taken from the start of `stream`.
///
/// A pure function of its arguments; `std == 0` returns the exact zero vector.
pub fn gaussian_vector(std: f64, dim: usize, stream: &RngStream) -> ParamVector {
    assert!(std >= 0.0 && !std.is_nan(), "standard deviation must be >= 0");
    if std == 0.0 {
        return ParamVector::zeros(dim);
    }
    let mut out = vec![0.0; dim];
    stream.rng().fill_standard_normal(&mut out);
    for v in &mut out {
        *v *= std;
    }
    ParamVector(out)
}
