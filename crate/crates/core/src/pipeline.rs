//! The self-training loop: sampling, staged iteration, evaluation.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PrototypeMean, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::GmmBank;
use crate::losses::{confidence_weight, proto_contrastive_loss, weighted_cross_entropy};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::{AdamState, AdamW, AdaptModel, ModelShape, StepOutcome, TeacherStudent};
use crate::numeric::{argmax, softmax_stable};
use crate::priors::{assign_pseudo_label, corrected_posterior, Domain, PriorTracker};
use crate::proto::{
    batch_class_mean, select_source_prototypes, select_target_prototypes, TargetBank, TargetPrototypes,
};

/// `P(c) ∝ exp((1 - freq_c) / T)`.
pub fn rcs_probabilities(freq: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = freq.iter().map(|f| (1.0 - f) / temperature).collect();
    softmax_stable(&logits)
}

/// Rare-class sampler over a labeled dataset.
#[derive(Debug, Clone)]
pub struct RcsSampler {
    by_class: Vec<Vec<usize>>,
    probs: Vec<f64>,
    classes: WeightedIndex<f64>,
}

impl RcsSampler {
    pub fn new(labels: &[usize], n_classes: usize, temperature: f64) -> Result<Self> {
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= n_classes {
                return Err(Error::contract(format!("label {y} out of range 0..{n_classes}")));
            }
            by_class[y].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::contract(format!("class {c} has no source samples")));
        }
        let n = labels.len() as f64;
        let freq: Vec<f64> = by_class.iter().map(|v| v.len() as f64 / n).collect();
        let probs = rcs_probabilities(&freq, temperature);
        let classes = WeightedIndex::new(&probs).map_err(|e| Error::contract(e.to_string()))?;
        Ok(RcsSampler {
            by_class,
            probs,
            classes,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Sample indices with their labels.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Vec<(usize, usize)> {
        (0..batch)
            .map(|_| {
                let c = self.classes.sample(rng);
                let members = &self.by_class[c];
                (members[rng.random_range(0..members.len())], c)
            })
            .collect()
    }
}

/// Everything a checkpoint persists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub models: TeacherStudent,
    pub adam: AdamState,
    pub gmm: GmmBank,
    pub priors: PriorTracker,
    pub target_bank: TargetBank,
    pub prototypes: TargetPrototypes,
    pub iteration: usize,
}

impl AdaptState {
    pub fn new(config: &TrainConfig, input_dim: usize, n_classes: usize) -> Result<Self> {
        config.validate_for(n_classes)?;
        let shape = ModelShape {
            input_dim,
            hidden: config.hidden.clone(),
            proj_hidden: config.proj_hidden,
            embed_dim: config.embed_dim,
            n_classes,
        };
        let student = AdaptModel::new(shape, config.seed);
        let n_params = student.params().len();
        let mut gmm_config = config.gmm.clone();
        gmm_config.seed = config.seed;
        Ok(AdaptState {
            models: TeacherStudent::new(student, config.ema_beta),
            adam: AdamState::new(n_params),
            gmm: GmmBank::new(n_classes, config.embed_dim, gmm_config),
            priors: PriorTracker::new(n_classes, config.prior_alpha),
            target_bank: TargetBank::new(n_classes, config.target_bank_capacity),
            prototypes: TargetPrototypes::new(n_classes),
            iteration: 0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.models.student.shape().n_classes
    }
}

/// Outcome of an optional loss term in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermStatus {
    Applied,
    /// Iteration at or before `iter_dist`.
    Gated,
    /// Disabled by configuration.
    Disabled,
    /// A GMM or prototype it needs is uninitialized.
    NotReady,
}

impl TermStatus {
    pub fn applied(self) -> bool {
        self == TermStatus::Applied
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TermStatus::Applied => "applied",
            TermStatus::Gated => "gated",
            TermStatus::Disabled => "disabled",
            TermStatus::NotReady => "not_ready",
        }
    }
}

/// Stages of one iteration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    GmmUpdate,
    SourceContrast,
    SourcePrior,
    TeacherTarget,
    TargetPrior,
    TargetPrototypes,
    TargetContrast,
    CrossEntropy,
    OptimizerStep,
    TeacherEma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub ce_source: f64,
    pub ce_target: f64,
    pub contrast_source: f64,
    pub contrast_target: f64,
    pub confidence: f64,
    pub source_contrast: TermStatus,
    pub target_contrast: TermStatus,
    /// Target samples whose pseudo-label ignored prototypes.
    pub pseudo_fallbacks: usize,
    /// Target samples whose prior ratio hit the clamp.
    pub ratio_clamps: usize,
    /// Target samples where GMM and teacher pseudo-labels disagree.
    pub pseudo_disagreements: usize,
    pub step: StepOutcome,
    pub stages: Vec<Stage>,
}

pub const DIAGNOSTICS_HEADER: &str = "iteration,lr,total,ce_source,ce_target,contrast_source,contrast_target,\
confidence,source_contrast,target_contrast,pseudo_fallbacks,ratio_clamps,pseudo_disagreements,step";

impl IterationRecord {
    pub fn csv_row(&self) -> String {
        let step = match self.step {
            StepOutcome::Applied => "applied",
            StepOutcome::Rejected => "rejected",
        };
        let mut out = String::new();
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.lr,
            self.total,
            self.ce_source,
            self.ce_target,
            self.contrast_source,
            self.contrast_target,
            self.confidence,
            self.source_contrast.as_str(),
            self.target_contrast.as_str(),
            self.pseudo_fallbacks,
            self.ratio_clamps,
            self.pseudo_disagreements,
            step
        );
        out
    }
}

fn is_not_ready(e: &Error) -> bool {
    matches!(e, Error::NotReady(_))
}

pub struct Trainer {
    config: TrainConfig,
    state: AdaptState,
    optimizer: AdamW,
    source: Dataset,
    source_labels: Vec<usize>,
    target: Dataset,
    sampler: RcsSampler,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, source: Dataset, target: Dataset) -> Result<Self> {
        if source.dim != target.dim || source.n_classes != target.n_classes {
            return Err(Error::contract("source and target disagree on dim or class count"));
        }
        if target.is_empty() {
            return Err(Error::contract("target set is empty"));
        }
        let state = AdaptState::new(&config, source.dim, source.n_classes)?;
        let source_labels = source.known_labels()?;
        let sampler = RcsSampler::new(&source_labels, source.n_classes, config.rcs_temperature)?;
        Ok(Trainer {
            optimizer: config.optimizer.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            state,
            source,
            source_labels,
            target,
            sampler,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &AdaptState {
        &self.state
    }

    pub fn into_state(self) -> AdaptState {
        self.state
    }

    pub fn sampler(&self) -> &RcsSampler {
        &self.sampler
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.n_iter
    }

    fn learning_rate(&self, iteration: usize) -> f64 {
        let warm = self.config.warmup_iters;
        if warm == 0 || iteration >= warm {
            self.config.lr
        } else {
            self.config.lr * iteration as f64 / warm as f64
        }
    }

    /// Samples an RCS source batch and a uniform target batch, then trains.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let src = self.sampler.sample(self.config.batch_source, &mut self.rng);
        let tgt: Vec<usize> = (0..self.config.batch_target)
            .map(|_| self.rng.random_range(0..self.target.len()))
            .collect();
        let xs: Vec<Vec<f64>> = src.iter().map(|&(i, _)| self.source.row(i).to_vec()).collect();
        let ys: Vec<usize> = src.iter().map(|&(i, _)| self.source_labels[i]).collect();
        let xt: Vec<Vec<f64>> = tgt.iter().map(|&i| self.target.row(i).to_vec()).collect();
        self.train_iteration(&xs, &ys, &xt)
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self, mut on_record: impl FnMut(&IterationRecord) -> Result<()>) -> Result<()> {
        while !self.is_finished() {
            let rec = self.step()?;
            on_record(&rec)?;
        }
        Ok(())
    }

    pub fn train_iteration<X: AsRef<[f64]>>(
        &mut self,
        xs: &[X],
        ys: &[usize],
        xt: &[X],
    ) -> Result<IterationRecord> {
        if xs.len() != ys.len() || xs.is_empty() || xt.is_empty() {
            return Err(Error::contract("source/target batch shapes are inconsistent"));
        }
        let iteration = self.state.iteration + 1;
        let past_warmup = iteration > self.config.iter_dist;
        let cfg = &self.config;
        let st = &mut self.state;
        let mut stages = Vec::with_capacity(10);
        let student = &st.models.student;
        let mut grads = student.zero_grads();
        let c = st.n_classes();

        // Student on source, then the GMM update with detached features.
        let fwd_s = xs.iter().map(|x| student.forward(x.as_ref())).collect::<Result<Vec<_>>>()?;
        // Samples with a degenerate projection only feed the cross-entropy.
        let (idx_s, fs) = embeddings(&fwd_s);
        let ys_e: Vec<usize> = idx_s.iter().map(|&i| ys[i]).collect();
        st.gmm.em_update(&fs, &ys_e)?;
        stages.push(Stage::GmmUpdate);

        let lambda = cfg.loss.lambda_contrast;
        let contrast_enabled = lambda != 0.0;
        let mut grad_emb_s: Vec<Option<Vec<f64>>> = vec![None; xs.len()];
        let mut contrast_source = 0.0;
        let source_contrast = if !past_warmup {
            TermStatus::Gated
        } else if !contrast_enabled {
            TermStatus::Disabled
        } else {
            match contrastive_term(&fs, &ys_e, &st.gmm, cfg.loss.tau, lambda, false)? {
                Some((value, grads_f)) => {
                    contrast_source = value;
                    for (&i, g) in idx_s.iter().zip(grads_f) {
                        grad_emb_s[i] = Some(g);
                    }
                    TermStatus::Applied
                }
                None => TermStatus::NotReady,
            }
        };
        stages.push(Stage::SourceContrast);

        st.priors.update(ys, Domain::Source)?;
        stages.push(Stage::SourcePrior);

        let teacher_probs = xt
            .iter()
            .map(|x| st.models.teacher.logits(x.as_ref()).map(|z| softmax_stable(&z)))
            .collect::<Result<Vec<_>>>()?;
        let teacher_labels: Vec<usize> = teacher_probs.iter().map(|p| argmax(p)).collect();
        let confidence = confidence_weight(&teacher_probs, cfg.loss.beta_conf);
        stages.push(Stage::TeacherTarget);

        st.priors.update(&teacher_labels, Domain::Target)?;
        stages.push(Stage::TargetPrior);

        let fwd_t = xt.iter().map(|x| student.forward(x.as_ref())).collect::<Result<Vec<_>>>()?;
        let (idx_t, ft) = embeddings(&fwd_t);
        let tl_e: Vec<usize> = idx_t.iter().map(|&i| teacher_labels[i]).collect();
        let batch_means = batch_class_mean(&ft, &tl_e, c)?;
        st.target_bank.update(&ft, &tl_e, &batch_means, cfg.target_top_k)?;
        let fresh: Vec<Option<Vec<f64>>> = match cfg.proto_mean {
            PrototypeMean::Batch => batch_means,
            PrototypeMean::Bank => batch_means
                .iter()
                .enumerate()
                .map(|(k, m)| m.as_ref().and_then(|_| st.target_bank.class_mean(k)))
                .collect(),
        };
        st.prototypes.update(&fresh, cfg.proto_alpha)?;
        stages.push(Stage::TargetPrototypes);

        let mut grad_emb_t: Vec<Option<Vec<f64>>> = vec![None; xt.len()];
        let mut contrast_target = 0.0;
        let (mut pseudo_fallbacks, mut ratio_clamps, mut pseudo_disagreements) = (0, 0, 0);
        let target_contrast = if !past_warmup {
            TermStatus::Gated
        } else if !contrast_enabled || !cfg.target_losses {
            TermStatus::Disabled
        } else {
            let mut pseudo = Vec::with_capacity(ft.len());
            let mut ready = true;
            for (f, &tl) in ft.iter().zip(&tl_e) {
                match assign_pseudo_label(f, &st.gmm, &st.priors, &st.prototypes) {
                    Ok(p) => {
                        pseudo_fallbacks += usize::from(p.fallback);
                        ratio_clamps += usize::from(p.clamped);
                        pseudo_disagreements += usize::from(p.class != tl);
                        pseudo.push(p.class);
                    }
                    Err(e) if is_not_ready(&e) => {
                        ready = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            match ready
                .then(|| contrastive_term(&ft, &pseudo, &st.gmm, cfg.loss.tau, lambda, true))
                .transpose()?
                .flatten()
            {
                Some((value, grads_f)) => {
                    contrast_target = value;
                    for (&i, g) in idx_t.iter().zip(grads_f) {
                        grad_emb_t[i] = Some(g);
                    }
                    TermStatus::Applied
                }
                None => TermStatus::NotReady,
            }
        };
        stages.push(Stage::TargetContrast);

        let logits_s: Vec<&[f64]> = fwd_s.iter().map(|f| f.logits.as_slice()).collect();
        let ce_s = weighted_cross_entropy(&logits_s, ys, 1.0)?;
        let logits_t: Vec<&[f64]> = fwd_t.iter().map(|f| f.logits.as_slice()).collect();
        let target_weight = if cfg.target_losses { confidence } else { 0.0 };
        let ce_t = weighted_cross_entropy(&logits_t, &teacher_labels, target_weight)?;
        stages.push(Stage::CrossEntropy);

        for (i, f) in fwd_s.iter().enumerate() {
            let gl = &ce_s.grad[i * c..(i + 1) * c];
            student.backward(&f.cache, gl, grad_emb_s[i].as_deref(), &mut grads)?;
        }
        for (i, f) in fwd_t.iter().enumerate() {
            let gl = &ce_t.grad[i * c..(i + 1) * c];
            if target_weight == 0.0 && grad_emb_t[i].is_none() {
                continue;
            }
            student.backward(&f.cache, gl, grad_emb_t[i].as_deref(), &mut grads)?;
        }
        let lr = self.learning_rate(iteration);
        let st = &mut self.state;
        let step = self
            .optimizer
            .step(st.models.student.params_mut(), &grads, &mut st.adam, lr);
        stages.push(Stage::OptimizerStep);
        st.models.ema_update();
        stages.push(Stage::TeacherEma);
        st.iteration = iteration;

        let total = ce_s.value + ce_t.value + lambda * (contrast_source + contrast_target);
        Ok(IterationRecord {
            iteration,
            lr,
            total,
            ce_source: ce_s.value,
            ce_target: ce_t.value,
            contrast_source,
            contrast_target,
            confidence,
            source_contrast,
            target_contrast,
            pseudo_fallbacks,
            ratio_clamps,
            pseudo_disagreements,
            step,
            stages,
        })
    }
}

fn embeddings(fwd: &[crate::model::Forward]) -> (Vec<usize>, Vec<&[f64]>) {
    fwd.iter()
        .enumerate()
        .filter_map(|(i, f)| f.embedding.as_ref().map(|e| (i, &e[..])))
        .unzip()
}

/// Batch-mean contrastive loss and the per-sample embedding gradients of
/// `lambda * loss`. `None` when a needed GMM is uninitialized.
fn contrastive_term(
    features: &[&[f64]],
    labels: &[usize],
    bank: &GmmBank,
    tau: f64,
    lambda: f64,
    target: bool,
) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    if features.is_empty() {
        return Ok(None);
    }
    let n = features.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for (f, &y) in features.iter().zip(labels) {
        let sel = if target {
            select_target_prototypes(f, y, bank)
        } else {
            select_source_prototypes(f, y, bank)
        };
        let sel = match sel {
            Ok(s) => s,
            Err(e) if is_not_ready(&e) => return Ok(None),
            Err(e) => return Err(e),
        };
        let out = proto_contrastive_loss(f, &sel, tau)?;
        value += out.value / n;
        grads.push(out.grad.into_iter().map(|g| lambda * g / n).collect());
    }
    Ok(Some((value, grads)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Predictor {
    /// Argmax of the classifier head.
    Head,
    /// Argmax of the label-shift-corrected GMM posterior of the embedding.
    Gmm,
}

impl std::str::FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Predictor::Head),
            "gmm" => Ok(Predictor::Gmm),
            other => Err(Error::config("predictor", format!("expected head or gmm, got `{other}`"))),
        }
    }
}

pub fn predict(state: &AdaptState, inputs: &Dataset, predictor: Predictor) -> Result<Vec<usize>> {
    let model = &state.models.student;
    (0..inputs.len())
        .map(|i| {
            let x = inputs.row(i);
            match predictor {
                Predictor::Head => model.logits(x).map(|z| argmax(&z)),
                Predictor::Gmm => {
                    let fw = model.forward(x)?;
                    corrected_posterior(fw.unit()?, &state.gmm, &state.priors).map(|p| argmax(&p.probs))
                }
            }
        })
        .collect()
}

pub fn evaluate(state: &AdaptState, inputs: &Dataset, labels: &[usize], predictor: Predictor) -> Result<Metrics> {
    if inputs.is_empty() {
        return Err(Error::contract("cannot evaluate an empty set"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} samples but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let pred = predict(state, inputs, predictor)?;
    ConfusionMatrix::from_predictions(labels, &pred, state.n_classes())?.metrics()
}
