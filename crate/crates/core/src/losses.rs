//! Training losses and their gradients: weighted cross-entropy with batch
//! confidence weights, and the multi-prototype contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, log_sum_exp, softmax_stable};
use crate::proto::PrototypeSelection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub beta_conf: f64,
    pub lambda_contrast: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            beta_conf: 0.968,
            lambda_contrast: 1.0,
        }
    }
}

impl LossConfig {
    /// `beta_conf = 1` is accepted: no probability exceeds it, which switches
    /// the target cross-entropy off entirely.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be > 0"));
        }
        if !(self.beta_conf > 0.0 && self.beta_conf <= 1.0) {
            return Err(Error::config("beta_conf", "must lie in (0, 1]"));
        }
        if !(self.lambda_contrast >= 0.0) {
            return Err(Error::config("lambda_contrast", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Fraction of samples whose top class probability exceeds `beta`.
pub fn confidence_weight<P: AsRef<[f64]>>(teacher_probs: &[P], beta: f64) -> f64 {
    if teacher_probs.is_empty() {
        return 0.0;
    }
    let confident = teacher_probs
        .iter()
        .filter(|p| p.as_ref().iter().copied().fold(f64::NEG_INFINITY, f64::max) > beta)
        .count();
    confident as f64 / teacher_probs.len() as f64
}

/// Batch-mean cross-entropy scaled by `weight`. The gradient is returned per
/// sample, row-major `batch x C`, already divided by the batch size.
pub fn weighted_cross_entropy<L: AsRef<[f64]>>(
    logits: &[L],
    labels: &[usize],
    weight: f64,
) -> Result<LossOutput> {
    if logits.len() != labels.len() {
        return Err(Error::contract("logits and labels differ in length"));
    }
    let n_classes = logits.first().map_or(0, |l| l.as_ref().len());
    let mut grad = vec![0.0; logits.len() * n_classes];
    if logits.is_empty() {
        return Ok(LossOutput { value: 0.0, grad });
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    for (i, (z, &y)) in logits.iter().zip(labels).enumerate() {
        let z = z.as_ref();
        if y >= z.len() {
            return Err(Error::contract(format!("label {y} out of range 0..{}", z.len())));
        }
        if weight == 0.0 {
            continue;
        }
        value -= z[y] - log_sum_exp(z);
        let p = softmax_stable(z);
        let row = &mut grad[i * n_classes..(i + 1) * n_classes];
        for (c, (g, pc)) in row.iter_mut().zip(&p).enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            *g = weight * (pc - onehot) / n;
        }
    }
    Ok(LossOutput {
        value: weight * value / n,
        grad,
    })
}

/// `-log(exp(f.q+/tau) / (exp(f.q+/tau) + sum_k exp(f.q-_k/tau)))` and its
/// gradient with respect to `f`: `(sum_j p_j q_j - q+) / tau`.
pub fn proto_contrastive_loss(f: &[f64], sel: &PrototypeSelection, tau: f64) -> Result<LossOutput> {
    if sel.negatives.is_empty() {
        return Err(Error::contract("contrastive loss needs at least one negative"));
    }
    let protos: Vec<&[f64]> = std::iter::once(sel.positive.mean.as_slice())
        .chain(sel.negatives.iter().map(|n| n.mean.as_slice()))
        .collect();
    if protos.iter().any(|q| q.len() != f.len()) {
        return Err(Error::contract("prototype and feature dimensions differ"));
    }
    let logits: Vec<f64> = protos.iter().map(|q| dot(f, q) / tau).collect();
    let value = log_sum_exp(&logits) - logits[0];
    let p = softmax_stable(&logits);
    let mut grad = vec![0.0; f.len()];
    for (pj, q) in p.iter().zip(&protos) {
        for (g, x) in grad.iter_mut().zip(q.iter()) {
            *g += pj * x;
        }
    }
    for (g, x) in grad.iter_mut().zip(protos[0]) {
        *g = (*g - x) / tau;
    }
    Ok(LossOutput {
        value: value.max(0.0),
        grad,
    })
}
