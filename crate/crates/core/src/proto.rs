//! Hard positive/negative prototype selection against the source mixtures,
//! plus the target bank and the EMA target class prototypes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{ClassGmm, GmmBank};
use crate::numeric::{argmax, cosine_similarity};

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class: usize,
    pub component: usize,
    pub mean: Vec<f64>,
}

/// One positive prototype from the sample's own class and one hard negative
/// from every other class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSelection {
    pub positive: Prototype,
    pub negatives: Vec<Prototype>,
}

/// Component of `gmm` with the highest posterior for `f`. The posterior
/// denominator is shared across components, so the log-joint argmax is used.
pub fn closest_component(gmm: &ClassGmm, f: &[f64]) -> usize {
    argmax(&gmm.log_joint(f))
}

fn prototype(gmm: &ClassGmm, f: &[f64]) -> Prototype {
    let m = closest_component(gmm, f);
    Prototype {
        class: gmm.class_id,
        component: m,
        mean: gmm.components[m].mean.clone(),
    }
}

fn select(f: &[f64], label: usize, bank: &GmmBank) -> Result<PrototypeSelection> {
    if label >= bank.n_classes() {
        return Err(Error::contract(format!(
            "label {label} out of range 0..{}",
            bank.n_classes()
        )));
    }
    let mut negatives = Vec::with_capacity(bank.n_classes() - 1);
    let mut positive = None;
    for c in 0..bank.n_classes() {
        let p = prototype(bank.gmm(c)?, f);
        if c == label {
            positive = Some(p);
        } else {
            negatives.push(p);
        }
    }
    Ok(PrototypeSelection {
        positive: positive.expect("label checked above"),
        negatives,
    })
}

/// Positive: mean of the most probable component of the sample's labelled
/// class. Negatives: mean of the most probable component of each other class.
pub fn select_source_prototypes(f: &[f64], label: usize, bank: &GmmBank) -> Result<PrototypeSelection> {
    select(f, label, bank)
}

/// Same rule as the source side, keyed on the target pseudo-label.
pub fn select_target_prototypes(
    f: &[f64],
    pseudo_label: usize,
    bank: &GmmBank,
) -> Result<PrototypeSelection> {
    select(f, pseudo_label, bank)
}

/// Per-class mean of a batch; `None` for classes absent from it.
pub fn batch_class_mean<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    if features.len() != labels.len() {
        return Err(Error::contract("features and labels differ in length"));
    }
    let dim = features.first().map_or(0, |f| f.as_ref().len());
    let mut sums = vec![vec![0.0; dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (f, &c) in features.iter().zip(labels) {
        if c >= n_classes {
            return Err(Error::contract(format!("label {c} out of range 0..{n_classes}")));
        }
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(f.as_ref()) {
            *s += x;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|x| x / n as f64).collect()))
        .collect())
}

/// Bounded per-class FIFO store of reliable target embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBank {
    capacity: usize,
    per_class: Vec<VecDeque<Vec<f64>>>,
}

impl TargetBank {
    pub fn new(n_classes: usize, capacity: usize) -> Self {
        TargetBank {
            capacity,
            per_class: vec![VecDeque::new(); n_classes],
        }
    }

    pub fn class(&self, c: usize) -> &VecDeque<Vec<f64>> {
        &self.per_class[c]
    }

    pub fn len(&self, c: usize) -> usize {
        self.per_class[c].len()
    }

    pub fn class_mean(&self, c: usize) -> Option<Vec<f64>> {
        let items = &self.per_class[c];
        let first = items.front()?;
        let mut mean = vec![0.0; first.len()];
        for v in items {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let n = items.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }

    /// For each class, admits the `top_k` batch members most cosine-similar
    /// to that class's batch mean. Ties go to the lower sample index.
    pub fn update<F: AsRef<[f64]>>(
        &mut self,
        features: &[F],
        labels: &[usize],
        means: &[Option<Vec<f64>>],
        top_k: usize,
    ) -> Result<()> {
        if features.len() != labels.len() || means.len() != self.per_class.len() {
            return Err(Error::contract("target bank update with inconsistent shapes"));
        }
        for (c, mean) in means.iter().enumerate() {
            let Some(mean) = mean else { continue };
            let mut scored = Vec::new();
            for (i, (f, &l)) in features.iter().zip(labels).enumerate() {
                if l == c {
                    scored.push((cosine_similarity(f.as_ref(), mean)?, i));
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let buf = &mut self.per_class[c];
            for &(_, i) in scored.iter().take(top_k) {
                buf.push_back(features[i].as_ref().to_vec());
                while buf.len() > self.capacity {
                    buf.pop_front();
                }
            }
        }
        Ok(())
    }
}

/// EMA target class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPrototypes {
    protos: Vec<Option<Vec<f64>>>,
}

impl TargetPrototypes {
    pub fn new(n_classes: usize) -> Self {
        TargetPrototypes {
            protos: vec![None; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.protos.len()
    }

    pub fn get(&self, c: usize) -> Option<&[f64]> {
        self.protos[c].as_deref()
    }

    pub fn n_initialized(&self) -> usize {
        self.protos.iter().filter(|p| p.is_some()).count()
    }

    /// `mu = alpha * mu + (1 - alpha) * fresh` for classes with a fresh
    /// mean; the first update of a class just copies it.
    pub fn update(&mut self, fresh: &[Option<Vec<f64>>], alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("EMA factor {alpha} outside [0, 1]")));
        }
        if fresh.len() != self.protos.len() {
            return Err(Error::contract("prototype update with wrong class count"));
        }
        for (slot, new) in self.protos.iter_mut().zip(fresh) {
            let Some(new) = new else { continue };
            match slot {
                Some(old) => {
                    for (o, n) in old.iter_mut().zip(new) {
                        *o = alpha * *o + (1.0 - alpha) * n;
                    }
                }
                None => *slot = Some(new.clone()),
            }
        }
        Ok(())
    }
}
