//! Class-prior tracking for both domains, prior-ratio correction of source
//! posteriors, and target pseudo-label assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::GmmBank;
use crate::numeric::{argmax, cosine_similarity, normalize_log};
use crate::proto::TargetPrototypes;

/// Bounds applied to `delta_target / delta_source`.
pub const RATIO_MIN: f64 = 1e-3;
pub const RATIO_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTracker {
    pub delta_source: Vec<f64>,
    pub delta_target: Vec<f64>,
    pub alpha: f64,
}

impl PriorTracker {
    /// Both domains start uniform.
    pub fn new(n_classes: usize, alpha: f64) -> Self {
        let uniform = vec![1.0 / n_classes as f64; n_classes];
        PriorTracker {
            delta_source: uniform.clone(),
            delta_target: uniform,
            alpha,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.delta_source.len()
    }

    pub fn priors(&self, domain: Domain) -> &[f64] {
        match domain {
            Domain::Source => &self.delta_source,
            Domain::Target => &self.delta_target,
        }
    }

    /// `delta = alpha * delta + (1 - alpha) * batch_proportion`, renormalized.
    /// An empty batch is a no-op.
    pub fn update(&mut self, labels: &[usize], domain: Domain) -> Result<()> {
        if labels.is_empty() {
            return Ok(());
        }
        let c_count = self.n_classes();
        let mut counts = vec![0usize; c_count];
        for &l in labels {
            if l >= c_count {
                return Err(Error::contract(format!("label {l} out of range 0..{c_count}")));
            }
            counts[l] += 1;
        }
        let alpha = self.alpha;
        let n = labels.len() as f64;
        let delta = match domain {
            Domain::Source => &mut self.delta_source,
            Domain::Target => &mut self.delta_target,
        };
        for (d, &k) in delta.iter_mut().zip(&counts) {
            *d = alpha * *d + (1.0 - alpha) * (k as f64 / n);
        }
        let total: f64 = delta.iter().sum();
        delta.iter_mut().for_each(|d| *d /= total);
        Ok(())
    }
}

/// `p_s(c | f)` under uniform source class priors.
pub fn source_class_posterior(f: &[f64], bank: &GmmBank) -> Result<Vec<f64>> {
    let logliks = (0..bank.n_classes())
        .map(|c| bank.class_conditional_logpdf(f, c))
        .collect::<Result<Vec<_>>>()?;
    // The uniform 1/C prior cancels in the normalization.
    Ok(normalize_log(&logliks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedPosterior {
    pub probs: Vec<f64>,
    /// Some prior ratio hit a clamp bound.
    pub clamped: bool,
}

/// Clamped `delta_target / delta_source`. A zero source prior maps to the
/// upper bound (or 1 when the target prior is zero too).
pub fn prior_ratio(delta_target: f64, delta_source: f64) -> (f64, bool) {
    if delta_source <= 0.0 {
        return if delta_target <= 0.0 {
            (1.0, true)
        } else {
            (RATIO_MAX, true)
        };
    }
    let r = delta_target / delta_source;
    let clamped = r.clamp(RATIO_MIN, RATIO_MAX);
    (clamped, clamped != r)
}

/// Multiplies a source posterior by the prior ratio and renormalizes. When
/// every ratio is exactly 1 the input is returned unchanged.
pub fn correct_posterior(source_posterior: &[f64], priors: &PriorTracker) -> Result<CorrectedPosterior> {
    if source_posterior.len() != priors.n_classes() {
        return Err(Error::contract("posterior and priors differ in class count"));
    }
    let mut clamped = false;
    let ratios: Vec<f64> = priors
        .delta_target
        .iter()
        .zip(&priors.delta_source)
        .map(|(&t, &s)| {
            let (r, hit) = prior_ratio(t, s);
            clamped |= hit;
            r
        })
        .collect();
    if ratios.iter().all(|&r| r == 1.0) {
        return Ok(CorrectedPosterior {
            probs: source_posterior.to_vec(),
            clamped,
        });
    }
    let mut probs: Vec<f64> = source_posterior.iter().zip(&ratios).map(|(p, r)| p * r).collect();
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    }
    Ok(CorrectedPosterior { probs, clamped })
}

/// Target posterior `p_t(c | f)` estimated from the source mixtures.
pub fn corrected_posterior(f: &[f64], bank: &GmmBank, priors: &PriorTracker) -> Result<CorrectedPosterior> {
    correct_posterior(&source_class_posterior(f, bank)?, priors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class: usize,
    pub scores: Vec<f64>,
    /// No target prototype existed; the label is the corrected-posterior argmax.
    pub fallback: bool,
    pub clamped: bool,
}

/// Softmax over initialized classes of `cos(mu_t^c, f)`; classes without a
/// prototype get `1 / n_initialized`.
pub fn prototype_similarity(f: &[f64], protos: &TargetPrototypes) -> Result<Option<Vec<f64>>> {
    let n_init = protos.n_initialized();
    if n_init == 0 {
        return Ok(None);
    }
    let mut cosines = Vec::with_capacity(n_init);
    for c in 0..protos.n_classes() {
        if let Some(p) = protos.get(c) {
            cosines.push(cosine_similarity(p, f)?);
        }
    }
    let soft = normalize_log(&cosines);
    let mut it = soft.into_iter();
    Ok(Some(
        (0..protos.n_classes())
            .map(|c| match protos.get(c) {
                Some(_) => it.next().expect("one entry per initialized class"),
                None => 1.0 / n_init as f64,
            })
            .collect(),
    ))
}

/// `argmax_c p_t(c | f) * softmax_c(cos(mu_t^c, f))`.
pub fn assign_pseudo_label(
    f: &[f64],
    bank: &GmmBank,
    priors: &PriorTracker,
    protos: &TargetPrototypes,
) -> Result<PseudoLabel> {
    let corrected = corrected_posterior(f, bank, priors)?;
    Ok(match prototype_similarity(f, protos)? {
        Some(sim) => {
            let scores: Vec<f64> = corrected.probs.iter().zip(&sim).map(|(p, s)| p * s).collect();
            PseudoLabel {
                class: argmax(&scores),
                scores,
                fallback: false,
                clamped: corrected.clamped,
            }
        }
        None => PseudoLabel {
            class: argmax(&corrected.probs),
            scores: corrected.probs,
            fallback: true,
            clamped: corrected.clamped,
        },
    })
}
