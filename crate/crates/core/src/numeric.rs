//! Scalar and vector kernels shared by every other module.
//!
//! Everything here is pure `f64` code. Precondition failures on the hot-path
//! kernels (`log_sum_exp`, `softmax_stable`, `diag_gaussian_logpdf`) panic;
//! the ones callers can trigger with data (`l2_normalize`,
//! `cosine_similarity`) return [`Error::Degenerate`].

use std::f64::consts::PI;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps values that are already unit-norm. Callers that are not sure
    /// should go through [`l2_normalize`].
    pub fn from_unit(values: Vec<f64>) -> Self {
        debug_assert!((norm(&values) - 1.0).abs() < 1e-9);
        FeatureVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Diagonal-covariance Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        assert_eq!(mean.len(), variance.len(), "mean/variance dimension mismatch");
        DiagGaussian { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / |v|` together with `|v|`, which backward passes need.
pub fn l2_normalize(v: &[f64]) -> Result<(FeatureVector, f64)> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::Degenerate(format!("cannot normalize vector with norm {n:e}")));
    }
    Ok((FeatureVector(v.iter().map(|x| x / n).collect()), n))
}

/// `log(sum(exp(xs)))` with a max shift.
///
/// # Panics
/// If `xs` is empty.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "log_sum_exp of an empty sequence");
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
///
/// # Panics
/// If `xs` is empty.
pub fn softmax_stable(xs: &[f64]) -> Vec<f64> {
    assert!(!xs.is_empty(), "softmax of an empty sequence");
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Turns log-scores into probabilities (softmax in log space).
pub fn normalize_log(scores: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

/// `log N(f; mean, diag(variance))`.
///
/// # Panics
/// On dimension mismatch.
pub fn diag_gaussian_logpdf(f: &[f64], g: &DiagGaussian) -> f64 {
    assert_eq!(f.len(), g.dim(), "feature/gaussian dimension mismatch");
    let mut acc = 0.0;
    for ((x, mu), var) in f.iter().zip(&g.mean).zip(&g.variance) {
        let d = x - mu;
        acc += (2.0 * PI * var).ln() + d * d / var;
    }
    -0.5 * acc
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na >= ZERO_NORM && nb >= ZERO_NORM) {
        return Err(Error::Degenerate("cosine similarity with a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
