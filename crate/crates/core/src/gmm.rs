//! Per-class Gaussian mixtures over source embeddings, fitted online with a
//! momentum Sinkhorn-EM over the live batch pooled with a FIFO memory.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{diag_gaussian_logpdf, log_sum_exp, DiagGaussian};

/// Components whose total responsibility falls below this keep their mean
/// and variance for the step.
pub const MIN_COMPONENT_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EStep {
    /// Ordinary Bayes posterior per sample.
    Plain,
    /// Balanced assignment: columns rescaled toward `N / M`.
    Sinkhorn { iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub n_components: usize,
    pub momentum: f64,
    pub estep: EStep,
    pub variance_floor: f64,
    pub memory_capacity: usize,
    pub per_image_cap: usize,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            n_components: 5,
            momentum: 0.999,
            estep: EStep::Sinkhorn { iterations: 10 },
            variance_floor: 1e-4,
            memory_capacity: 2048,
            per_image_cap: 100,
            seed: 0,
        }
    }
}

/// Mixture parameters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGmm {
    pub class_id: usize,
    pub weights: Vec<f64>,
    pub components: Vec<DiagGaussian>,
}

impl ClassGmm {
    pub fn new(class_id: usize, weights: Vec<f64>, components: Vec<DiagGaussian>) -> Self {
        assert_eq!(weights.len(), components.len());
        ClassGmm {
            class_id,
            weights,
            components,
        }
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `log pi_m + log N(f; mu_m, Sigma_m)` for every component.
    pub fn log_joint(&self, f: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w.ln() + diag_gaussian_logpdf(f, g))
            .collect()
    }

    /// `log p(f | c)`.
    pub fn logpdf(&self, f: &[f64]) -> f64 {
        log_sum_exp(&self.log_joint(f))
    }

    /// `p(m | f, c)`.
    pub fn posterior(&self, f: &[f64]) -> Vec<f64> {
        crate::numeric::normalize_log(&self.log_joint(f))
    }

    /// Sum of `log p(f | c)` over a batch.
    pub fn log_likelihood(&self, batch: &[&[f64]]) -> f64 {
        batch.iter().map(|f| self.logpdf(f)).sum()
    }
}

/// Row-major `N x M` soft assignment of samples to components.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Responsibilities {
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.cols..(n + 1) * self.cols]
    }

    pub fn get(&self, n: usize, m: usize) -> f64 {
        self.values[n * self.cols + m]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|n| self.row(n).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for n in 0..self.rows {
            for (s, r) in sums.iter_mut().zip(self.row(n)) {
                *s += r;
            }
        }
        sums
    }
}

fn log_kernel(gmm: &ClassGmm, batch: &[&[f64]]) -> Vec<f64> {
    let mut k = Vec::with_capacity(batch.len() * gmm.n_components());
    for f in batch {
        k.extend(gmm.log_joint(f));
    }
    k
}

fn normalize_rows(logk: &mut [f64], cols: usize) {
    for row in logk.chunks_mut(cols) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|x| *x -= lse);
    }
}

/// Plain E-step: each row is the component posterior of its sample.
pub fn plain_estep(gmm: &ClassGmm, batch: &[&[f64]]) -> Responsibilities {
    assert!(!batch.is_empty(), "E-step on an empty batch");
    let cols = gmm.n_components();
    let mut logk = log_kernel(gmm, batch);
    normalize_rows(&mut logk, cols);
    Responsibilities {
        rows: batch.len(),
        cols,
        values: logk.into_iter().map(f64::exp).collect(),
    }
}

/// Balanced E-step. Starting from `K[n][m] = pi_m N(f_n; mu_m, Sigma_m)`,
/// alternately rescales rows to 1 and columns to `N / M` for `iterations`
/// rounds, then rescales rows once more so each row sums to exactly 1.
/// Runs in log space.
pub fn sinkhorn_estep(gmm: &ClassGmm, batch: &[&[f64]], iterations: usize) -> Responsibilities {
    assert!(!batch.is_empty(), "E-step on an empty batch");
    let rows = batch.len();
    let cols = gmm.n_components();
    let log_col_target = (rows as f64 / cols as f64).ln();
    let mut logk = log_kernel(gmm, batch);
    let mut col = vec![0.0; rows];
    for _ in 0..iterations {
        normalize_rows(&mut logk, cols);
        for m in 0..cols {
            for n in 0..rows {
                col[n] = logk[n * cols + m];
            }
            let shift = log_sum_exp(&col) - log_col_target;
            for n in 0..rows {
                logk[n * cols + m] -= shift;
            }
        }
    }
    normalize_rows(&mut logk, cols);
    Responsibilities {
        rows,
        cols,
        values: logk.into_iter().map(f64::exp).collect(),
    }
}

/// Momentum M-step: batch estimates blended as
/// `theta = momentum * theta_old + (1 - momentum) * theta_hat`.
pub fn momentum_mstep(
    gmm: &mut ClassGmm,
    batch: &[&[f64]],
    resp: &Responsibilities,
    momentum: f64,
    variance_floor: f64,
) {
    assert_eq!(resp.rows, batch.len(), "responsibilities do not match batch");
    assert_eq!(resp.cols, gmm.n_components(), "responsibilities do not match mixture");
    let n_total = batch.len() as f64;
    let dim = gmm.dim();
    let mass = resp.col_sums();
    for (m, &mass_m) in mass.iter().enumerate() {
        gmm.weights[m] = momentum * gmm.weights[m] + (1.0 - momentum) * mass_m / n_total;
        if mass_m < MIN_COMPONENT_MASS {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for (n, f) in batch.iter().enumerate() {
            let r = resp.get(n, m);
            for (acc, x) in mean.iter_mut().zip(f.iter()) {
                *acc += r * x;
            }
        }
        mean.iter_mut().for_each(|x| *x /= mass_m);
        let mut var = vec![0.0; dim];
        for (n, f) in batch.iter().enumerate() {
            let r = resp.get(n, m);
            for ((acc, x), mu) in var.iter_mut().zip(f.iter()).zip(&mean) {
                let d = x - mu;
                *acc += r * d * d;
            }
        }
        var.iter_mut().for_each(|x| *x /= mass_m);

        let comp = &mut gmm.components[m];
        for (old, new) in comp.mean.iter_mut().zip(&mean) {
            *old = momentum * *old + (1.0 - momentum) * new;
        }
        for (old, new) in comp.variance.iter_mut().zip(&var) {
            *old = (momentum * *old + (1.0 - momentum) * new).max(variance_floor);
        }
    }
    let total: f64 = gmm.weights.iter().sum();
    gmm.weights.iter_mut().for_each(|w| *w /= total);
}

/// Per-class FIFO ring buffers of source embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMemory {
    capacity: usize,
    per_class: Vec<VecDeque<Vec<f64>>>,
}

impl SourceMemory {
    pub fn new(n_classes: usize, capacity: usize) -> Self {
        SourceMemory {
            capacity,
            per_class: vec![VecDeque::new(); n_classes],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn class(&self, c: usize) -> &VecDeque<Vec<f64>> {
        &self.per_class[c]
    }

    pub fn len(&self, c: usize) -> usize {
        self.per_class[c].len()
    }

    /// Appends at most `per_image_cap` features per class from this call
    /// (the first ones in order), evicting the oldest beyond capacity.
    pub fn push<F: AsRef<[f64]>>(
        &mut self,
        features: &[F],
        labels: &[usize],
        per_image_cap: usize,
    ) -> Result<()> {
        if features.len() != labels.len() {
            return Err(Error::contract("features and labels differ in length"));
        }
        let n_classes = self.per_class.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::contract(format!("label {bad} out of range 0..{n_classes}")));
        }
        let mut taken = vec![0usize; n_classes];
        for (f, &c) in features.iter().zip(labels) {
            if taken[c] >= per_image_cap {
                continue;
            }
            taken[c] += 1;
            let buf = &mut self.per_class[c];
            buf.push_back(f.as_ref().to_vec());
            while buf.len() > self.capacity {
                buf.pop_front();
            }
        }
        Ok(())
    }
}

/// One mixture per class plus the shared source memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmBank {
    config: GmmConfig,
    n_classes: usize,
    dim: usize,
    gmms: Vec<Option<ClassGmm>>,
    memory: SourceMemory,
}

impl GmmBank {
    pub fn new(n_classes: usize, dim: usize, config: GmmConfig) -> Self {
        assert!(config.n_components >= 1, "need at least one component");
        GmmBank {
            memory: SourceMemory::new(n_classes, config.memory_capacity),
            config,
            n_classes,
            dim,
            gmms: vec![None; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &GmmConfig {
        &self.config
    }

    pub fn memory(&self) -> &SourceMemory {
        &self.memory
    }

    pub fn set_gmm(&mut self, gmm: ClassGmm) {
        let c = gmm.class_id;
        self.gmms[c] = Some(gmm);
    }

    pub fn is_ready(&self) -> bool {
        self.gmms.iter().all(Option::is_some)
    }

    pub fn gmm(&self, c: usize) -> Result<&ClassGmm> {
        self.gmms
            .get(c)
            .ok_or_else(|| Error::contract(format!("class {c} out of range")))?
            .as_ref()
            .ok_or_else(|| Error::not_ready(format!("GMM for class {c} not initialized")))
    }

    pub fn gmms(&self) -> impl Iterator<Item = Option<&ClassGmm>> {
        self.gmms.iter().map(Option::as_ref)
    }

    pub fn class_conditional_logpdf(&self, f: &[f64], c: usize) -> Result<f64> {
        Ok(self.gmm(c)?.logpdf(f))
    }

    pub fn component_posterior(&self, f: &[f64], c: usize) -> Result<Vec<f64>> {
        Ok(self.gmm(c)?.posterior(f))
    }

    /// One momentum EM iteration per class present in the minibatch, over the
    /// batch pooled with that class's memory; then the batch enters memory.
    /// A class is initialized the first time its pool holds at least `M`
    /// samples.
    pub fn em_update<F: AsRef<[f64]>>(&mut self, features: &[F], labels: &[usize]) -> Result<()> {
        if features.len() != labels.len() {
            return Err(Error::contract("features and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range 0..{}",
                self.n_classes
            )));
        }
        if let Some(f) = features.iter().find(|f| f.as_ref().len() != self.dim) {
            return Err(Error::contract(format!(
                "feature dim {} != bank dim {}",
                f.as_ref().len(),
                self.dim
            )));
        }
        for c in 0..self.n_classes {
            let batch: Vec<&[f64]> = features
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(f, _)| f.as_ref())
                .collect();
            if batch.is_empty() {
                continue;
            }
            let mut pooled: Vec<&[f64]> = self.memory.class(c).iter().map(Vec::as_slice).collect();
            pooled.extend(batch);
            if self.gmms[c].is_none() {
                if pooled.len() < self.config.n_components {
                    continue;
                }
                self.gmms[c] = Some(self.initial_gmm(c, &pooled));
            }
            let gmm = self.gmms[c].as_mut().expect("initialized above");
            let resp = match self.config.estep {
                EStep::Plain => plain_estep(gmm, &pooled),
                EStep::Sinkhorn { iterations } => sinkhorn_estep(gmm, &pooled, iterations),
            };
            momentum_mstep(
                gmm,
                &pooled,
                &resp,
                self.config.momentum,
                self.config.variance_floor,
            );
        }
        self.memory.push(features, labels, self.config.per_image_cap)
    }

    /// Means drawn as `M` distinct pooled samples, unit variances, uniform
    /// weights. Seeded per class so the result does not depend on the order
    /// in which classes first appear.
    fn initial_gmm(&self, c: usize, pooled: &[&[f64]]) -> ClassGmm {
        let m = self.config.n_components;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config
                .seed
                .wrapping_add((c as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let picks = rand::seq::index::sample(&mut rng, pooled.len(), m);
        let components = picks
            .iter()
            .map(|i| DiagGaussian::new(pooled[i].to_vec(), vec![1.0; self.dim]))
            .collect();
        ClassGmm::new(c, vec![1.0 / m as f64; m], components)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::l2_normalize;
    use proptest::prelude::*;
    use rand::Rng;

    fn gauss(mean: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), var.to_vec())
    }

    fn random_gmm(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> ClassGmm {
        let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let comps = (0..m)
            .map(|_| {
                let mean = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let var = (0..dim).map(|_| rng.random_range(0.05..1.0)).collect();
                DiagGaussian::new(mean, var)
            })
            .collect();
        ClassGmm::new(0, w, comps)
    }

    /// Linear-space density straight from the definition.
    fn direct_density(g: &DiagGaussian, f: &[f64]) -> f64 {
        let mut p = 1.0;
        for ((x, mu), var) in f.iter().zip(&g.mean).zip(&g.variance) {
            p *= (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        }
        p
    }

    #[test]
    fn memory_fifo_eviction() {
        let mut mem = SourceMemory::new(1, 2);
        let v = [vec![1.0], vec![2.0], vec![3.0]];
        mem.push(&v, &[0, 0, 0], 100).unwrap();
        let held: Vec<_> = mem.class(0).iter().cloned().collect();
        assert_eq!(held, vec![vec![2.0], vec![3.0]]);
    }

    #[test]
    fn memory_per_call_cap() {
        let mut mem = SourceMemory::new(1, 10);
        let v = [vec![1.0], vec![2.0], vec![3.0]];
        mem.push(&v, &[0, 0, 0], 1).unwrap();
        assert_eq!(mem.len(0), 1);
    }

    #[test]
    fn memory_empty_push_and_bad_label() {
        let mut mem = SourceMemory::new(2, 10);
        let before = mem.clone();
        mem.push::<Vec<f64>>(&[], &[], 5).unwrap();
        assert_eq!(mem, before);
        assert!(matches!(mem.push(&[vec![0.0]], &[2], 5), Err(Error::Contract(_))));
    }

    #[test]
    fn single_component_logpdf_is_gaussian_logpdf() {
        let g = gauss(&[0.2, -0.1], &[0.5, 2.0]);
        let gmm = ClassGmm::new(0, vec![1.0], vec![g.clone()]);
        let f = [0.7, 0.3];
        assert!((gmm.logpdf(&f) - diag_gaussian_logpdf(&f, &g)).abs() < 1e-14);
    }

    #[test]
    fn duplicate_components_collapse() {
        let g = gauss(&[0.2, -0.1], &[0.5, 2.0]);
        let gmm = ClassGmm::new(0, vec![0.5, 0.5], vec![g.clone(), g.clone()]);
        let f = [0.7, 0.3];
        assert!((gmm.logpdf(&f) - diag_gaussian_logpdf(&f, &g)).abs() < 1e-14);
    }

    #[test]
    fn logpdf_matches_linear_space_sum() {
        let gmm = ClassGmm::new(
            0,
            vec![0.3, 0.7],
            vec![gauss(&[0.0, 1.0], &[0.4, 0.9]), gauss(&[-0.5, 0.2], &[1.3, 0.25])],
        );
        let f = [0.1, 0.6];
        let direct: f64 = gmm
            .weights
            .iter()
            .zip(&gmm.components)
            .map(|(w, g)| w * direct_density(g, &f))
            .sum();
        assert!((gmm.logpdf(&f) - direct.ln()).abs() < 1e-10);
    }

    #[test]
    fn posterior_symmetric_components() {
        let gmm = ClassGmm::new(
            0,
            vec![0.25; 4],
            vec![
                gauss(&[1.0, 0.0], &[0.3, 0.3]),
                gauss(&[-1.0, 0.0], &[0.3, 0.3]),
                gauss(&[0.0, 1.0], &[0.3, 0.3]),
                gauss(&[0.0, -1.0], &[0.3, 0.3]),
            ],
        );
        for p in gmm.posterior(&[0.0, 0.0]) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_two_term_ratio() {
        let gmm = ClassGmm::new(
            0,
            vec![0.5, 0.5],
            vec![gauss(&[0.0], &[1.0]), gauss(&[2.0], &[1.0])],
        );
        let p = gmm.posterior(&[0.0]);
        assert!((p[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((p[1] - 0.11920292202211755).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_bayes_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let gmm = random_gmm(&mut rng, 3, 4);
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let joint: Vec<f64> = gmm
                .weights
                .iter()
                .zip(&gmm.components)
                .map(|(w, g)| w * direct_density(g, &f))
                .collect();
            let total: f64 = joint.iter().sum();
            for (p, j) in gmm.posterior(&f).iter().zip(&joint) {
                assert!((p - j / total).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bank_not_ready_before_init() {
        let bank = GmmBank::new(2, 2, GmmConfig::default());
        assert!(matches!(bank.class_conditional_logpdf(&[0.0, 1.0], 0), Err(Error::NotReady(_))));
        assert!(matches!(bank.component_posterior(&[0.0, 1.0], 1), Err(Error::NotReady(_))));
    }

    #[test]
    fn sinkhorn_identical_samples_symmetric_components() {
        let gmm = ClassGmm::new(
            0,
            vec![0.5, 0.5],
            vec![gauss(&[1.0, 0.0], &[1.0, 1.0]), gauss(&[-1.0, 0.0], &[1.0, 1.0])],
        );
        let f = [0.0, 0.5];
        let r = sinkhorn_estep(&gmm, &[&f, &f], 10);
        for v in &r.values {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_separated_clusters_match_converged_run() {
        let gmm = ClassGmm::new(
            0,
            vec![0.5, 0.5],
            vec![gauss(&[1.0, 0.0], &[0.1, 0.1]), gauss(&[-1.0, 0.0], &[0.1, 0.1])],
        );
        let pts = [[0.9, 0.1], [1.1, -0.1], [-0.95, 0.0], [-1.05, 0.05]];
        let batch: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let oracle = sinkhorn_estep(&gmm, &batch, 1000);
        let r = sinkhorn_estep(&gmm, &batch, 10);
        for n in 0..4 {
            let near = if n < 2 { 0 } else { 1 };
            assert!(r.get(n, near) >= 0.99);
            assert!(oracle.get(n, near) >= 0.99);
            for m in 0..2 {
                assert!((r.get(n, m) - oracle.get(n, m)).abs() < 1e-6);
            }
        }
        for s in oracle.col_sums() {
            assert!((s - 2.0).abs() < 1e-3 * 4.0);
        }
    }

    #[test]
    fn mstep_momentum_zero_gives_batch_estimates() {
        let mut gmm = ClassGmm::new(
            0,
            vec![0.5, 0.5],
            vec![gauss(&[5.0], &[3.0]), gauss(&[-5.0], &[3.0])],
        );
        let a = [1.0];
        let b = [3.0];
        let resp = Responsibilities {
            rows: 2,
            cols: 2,
            values: vec![1.0, 0.0, 0.25, 0.75],
        };
        momentum_mstep(&mut gmm, &[&a, &b], &resp, 0.0, 1e-4);
        // component 0: mass 1.25, mean (1 + 0.75) / 1.25 = 1.4
        // var (1*(0.4)^2 + 0.25*(1.6)^2) / 1.25 = (0.16 + 0.64)/1.25 = 0.64
        assert!((gmm.components[0].mean[0] - 1.4).abs() < 1e-14);
        assert!((gmm.components[0].variance[0] - 0.64).abs() < 1e-14);
        assert!((gmm.components[1].mean[0] - 3.0).abs() < 1e-14);
        assert_eq!(gmm.components[1].variance[0], 1e-4);
        assert!((gmm.weights[0] - 0.625).abs() < 1e-14);
        assert!((gmm.weights[1] - 0.375).abs() < 1e-14);
    }

    #[test]
    fn mstep_momentum_one_is_identity() {
        let original = ClassGmm::new(
            0,
            vec![0.4, 0.6],
            vec![gauss(&[5.0], &[3.0]), gauss(&[-5.0], &[3.0])],
        );
        let mut gmm = original.clone();
        let (a, b) = ([1.0], [3.0]);
        let resp = plain_estep(&gmm, &[&a, &b]);
        momentum_mstep(&mut gmm, &[&a, &b], &resp, 1.0, 1e-4);
        assert_eq!(gmm, original);
    }

    #[test]
    fn mstep_half_momentum_weight_blend() {
        // Hand computation: pi_old = (1, 0); both samples fully on component 1
        // gives pi_hat = (0, 1), so pi_new = (0.5, 0.5). Component 0 has no
        // mass, so only its mean and variance are held.
        let mut gmm = ClassGmm::new(
            0,
            vec![1.0, 0.0],
            vec![gauss(&[0.0], &[1.0]), gauss(&[2.0], &[1.0])],
        );
        let (a, b) = ([1.0], [3.0]);
        let resp = Responsibilities {
            rows: 2,
            cols: 2,
            values: vec![0.0, 1.0, 0.0, 1.0],
        };
        momentum_mstep(&mut gmm, &[&a, &b], &resp, 0.5, 1e-4);
        assert!((gmm.weights[0] - 0.5).abs() < 1e-14);
        assert!((gmm.weights[1] - 0.5).abs() < 1e-14);
        // mean: 0.5*2 + 0.5*2 = 2; var: 0.5*1 + 0.5*1 = 1
        assert!((gmm.components[1].mean[0] - 2.0).abs() < 1e-14);
        assert!((gmm.components[1].variance[0] - 1.0).abs() < 1e-14);
        assert_eq!(gmm.components[0].mean[0], 0.0);
        assert_eq!(gmm.components[0].variance[0], 1.0);

        // Both components carry mass: plain blend, already normalized.
        let mut gmm = ClassGmm::new(
            0,
            vec![0.8, 0.2],
            vec![gauss(&[0.0], &[1.0]), gauss(&[2.0], &[1.0])],
        );
        let resp = Responsibilities {
            rows: 2,
            cols: 2,
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        momentum_mstep(&mut gmm, &[&a, &b], &resp, 0.5, 1e-4);
        assert!((gmm.weights[0] - 0.65).abs() < 1e-14);
        assert!((gmm.weights[1] - 0.35).abs() < 1e-14);
    }

    fn unit_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                l2_normalize(&v).unwrap().0.into_inner()
            })
            .collect()
    }

    #[test]
    fn em_update_empty_batch_is_noop() {
        let mut bank = GmmBank::new(2, 3, GmmConfig::default());
        let before = bank.clone();
        bank.em_update::<Vec<f64>>(&[], &[]).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn em_update_weights_normalized_and_memory_filled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GmmConfig {
            n_components: 3,
            seed: 11,
            ..GmmConfig::default()
        };
        let mut bank = GmmBank::new(2, 4, cfg);
        for _ in 0..5 {
            let feats = unit_batch(&mut rng, 20, 4);
            let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
            bank.em_update(&feats, &labels).unwrap();
            for c in 0..2 {
                let w: f64 = bank.gmm(c).unwrap().weights.iter().sum();
                assert!((w - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(bank.memory().len(0), 50);
    }

    #[test]
    fn em_update_plain_pooled_likelihood_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GmmConfig {
            n_components: 3,
            momentum: 0.0,
            estep: EStep::Plain,
            memory_capacity: 0,
            seed: 2,
            ..GmmConfig::default()
        };
        let mut bank = GmmBank::new(1, 4, cfg);
        let feats = unit_batch(&mut rng, 128, 4);
        let labels = vec![0; feats.len()];
        let batch: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..20 {
            bank.em_update(&feats, &labels).unwrap();
            let ll = bank.gmm(0).unwrap().log_likelihood(&batch);
            assert!(ll >= prev - 1e-9, "{ll} < {prev}");
            prev = ll;
        }
    }

    #[test]
    fn em_update_rejects_bad_input() {
        let mut bank = GmmBank::new(2, 2, GmmConfig::default());
        assert!(matches!(bank.em_update(&[vec![1.0, 0.0]], &[2]), Err(Error::Contract(_))));
        assert!(matches!(bank.em_update(&[vec![1.0]], &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn lazy_init_waits_for_enough_samples() {
        let cfg = GmmConfig {
            n_components: 3,
            ..GmmConfig::default()
        };
        let mut bank = GmmBank::new(1, 2, cfg);
        bank.em_update(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 0]).unwrap();
        assert!(bank.gmm(0).is_err());
        bank.em_update(&[vec![0.6, 0.8]], &[0]).unwrap();
        let gmm = bank.gmm(0).unwrap();
        let mut means: Vec<Vec<f64>> = gmm.components.iter().map(|g| g.mean.clone()).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        means.dedup();
        assert_eq!(means.len(), 3, "means must be distinct samples before the first step");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sinkhorn_marginals(seed in any::<u64>(), n in 20usize..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gmm = random_gmm(&mut rng, 4, 3);
            let feats = unit_batch(&mut rng, n, 3);
            let batch: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let r = sinkhorn_estep(&gmm, &batch, 200);
            for s in r.row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            for s in r.col_sums() {
                prop_assert!((s - n as f64 / 4.0).abs() < 1e-3 * n as f64);
            }
        }

        #[test]
        fn variance_floor_holds(seed in any::<u64>(), steps in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = GmmConfig {
                n_components: 3,
                momentum: rng.random_range(0.0..1.0),
                variance_floor: 1e-3,
                memory_capacity: 16,
                seed,
                ..GmmConfig::default()
            };
            let mut bank = GmmBank::new(2, 3, cfg);
            for _ in 0..steps {
                // Many duplicates push the batch variance toward zero.
                let base = unit_batch(&mut rng, 2, 3);
                let feats: Vec<Vec<f64>> = (0..12).map(|i| base[i % 2].clone()).collect();
                let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
                bank.em_update(&feats, &labels).unwrap();
            }
            for gmm in bank.gmms().flatten() {
                for g in &gmm.components {
                    prop_assert!(g.variance.iter().all(|&v| v >= 1e-3));
                }
            }
        }

        #[test]
        fn batch_permutation_invariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gmm = random_gmm(&mut rng, 3, 3);
            let feats = unit_batch(&mut rng, 40, 3);
            let mut perm: Vec<usize> = (0..40).collect();
            perm.reverse();
            perm.swap(3, 17);
            let a: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let b: Vec<&[f64]> = perm.iter().map(|&i| feats[i].as_slice()).collect();
            let (mut ga, mut gb) = (gmm.clone(), gmm);
            let ra = sinkhorn_estep(&ga, &a, 10);
            let rb = sinkhorn_estep(&gb, &b, 10);
            momentum_mstep(&mut ga, &a, &ra, 0.3, 1e-4);
            momentum_mstep(&mut gb, &b, &rb, 0.3, 1e-4);
            for (x, y) in ga.weights.iter().zip(&gb.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (p, q) in ga.components.iter().zip(&gb.components) {
                for (x, y) in p.mean.iter().zip(&q.mean).chain(p.variance.iter().zip(&q.variance)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
