//! Training configuration and its `key = value` file form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{EStep, GmmConfig};
use crate::kv;
use crate::losses::LossConfig;
use crate::model::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeMean {
    /// Mean of the class's target bank contents, batch mean when empty.
    Bank,
    /// Mean of the class's members in the current batch.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_iter: usize,
    pub iter_dist: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub hidden: Vec<usize>,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    pub optimizer: AdamW,
    pub ema_beta: f64,
    pub prior_alpha: f64,
    pub proto_alpha: f64,
    pub loss: LossConfig,
    pub gmm: GmmConfig,
    pub target_bank_capacity: usize,
    pub target_top_k: usize,
    pub proto_mean: PrototypeMean,
    pub rcs_temperature: f64,
    /// Target cross-entropy and target contrastive terms on/off.
    pub target_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let n_iter = 3000;
        TrainConfig {
            seed: 0,
            n_iter,
            iter_dist: n_iter / 10,
            batch_source: 64,
            batch_target: 64,
            hidden: vec![64, 64],
            proj_hidden: 64,
            embed_dim: 64,
            lr: 1e-3,
            warmup_iters: 100,
            optimizer: AdamW::default(),
            ema_beta: 0.999,
            prior_alpha: 0.9,
            proto_alpha: 0.9,
            loss: LossConfig::default(),
            gmm: GmmConfig::default(),
            target_bank_capacity: 1024,
            target_top_k: 16,
            proto_mean: PrototypeMean::Bank,
            rcs_temperature: 0.5,
            target_losses: true,
        }
    }
}

pub const SEED_ENV: &str = "PGMM_SEED";

/// Every accepted key with its meaning, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "RNG seed for initialization and sampling (PGMM_SEED overrides)"),
    ("n_iter", "total training iterations"),
    ("iter_dist", "iterations before contrastive terms switch on (default n_iter/10)"),
    ("batch_source", "source samples per iteration"),
    ("batch_target", "target samples per iteration"),
    ("hidden", "encoder widths, comma separated; last is the latent size"),
    ("proj_hidden", "projection head hidden width"),
    ("embed_dim", "embedding dimension D"),
    ("lr", "peak learning rate"),
    ("warmup_iters", "linear learning-rate warmup length"),
    ("adam_beta1", "AdamW first-moment decay"),
    ("adam_beta2", "AdamW second-moment decay"),
    ("adam_eps", "AdamW epsilon"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("ema_beta", "teacher EMA factor"),
    ("prior_alpha", "class prior EMA factor"),
    ("proto_alpha", "target prototype EMA factor"),
    ("tau", "contrastive temperature"),
    ("beta_conf", "confidence threshold for the target weight, in (0, 1]"),
    ("lambda_contrast", "weight of both contrastive terms"),
    ("gmm_components", "mixture components per class"),
    ("gmm_momentum", "momentum of the GMM parameter update"),
    ("estep", "sinkhorn or plain"),
    ("sinkhorn_iters", "Sinkhorn rescaling rounds per E-step"),
    ("variance_floor", "minimum GMM variance"),
    ("memory_capacity", "source memory size per class"),
    ("memory_per_batch", "max source features per class admitted per batch"),
    ("target_bank_capacity", "target bank size per class"),
    ("target_top_k", "target features per class admitted per batch"),
    ("proto_mean", "bank or batch: source of fresh target prototype means"),
    ("rcs_temperature", "rare-class sampling temperature"),
    ("target_losses", "true/false: train on target pseudo-labels and target contrast"),
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.iter_dist >= self.n_iter {
            return Err(Error::config("iter_dist", "must be < n_iter (and n_iter >= 1)"));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::config("batch_source", "batch sizes must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "need at least one positive width"));
        }
        if self.proj_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "projection sizes must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        for (key, v) in [
            ("ema_beta", self.ema_beta),
            ("prior_alpha", self.prior_alpha),
            ("proto_alpha", self.proto_alpha),
            ("gmm_momentum", self.gmm.momentum),
            ("adam_beta1", self.optimizer.beta1),
            ("adam_beta2", self.optimizer.beta2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        if self.gmm.n_components == 0 {
            return Err(Error::config("gmm_components", "must be >= 1"));
        }
        if !(self.gmm.variance_floor > 0.0) {
            return Err(Error::config("variance_floor", "must be > 0"));
        }
        if !(self.rcs_temperature > 0.0) {
            return Err(Error::config("rcs_temperature", "must be > 0"));
        }
        self.loss.validate()
    }

    /// Batch sizes below the class count make rare-class sampling infeasible.
    pub fn validate_for(&self, n_classes: usize) -> Result<()> {
        self.validate()?;
        if self.batch_source < n_classes || self.batch_target < n_classes {
            return Err(Error::config("batch_source", format!("batch sizes must be >= {n_classes}")));
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut iter_dist = None;
        let mut sinkhorn_iters = match cfg.gmm.estep {
            EStep::Sinkhorn { iterations } => iterations,
            EStep::Plain => 10,
        };
        let mut plain = false;
        for e in kv::parse(text)? {
            match e.key.as_str() {
                "seed" => cfg.seed = kv::scalar(&e)?,
                "n_iter" => cfg.n_iter = kv::scalar(&e)?,
                "iter_dist" => iter_dist = Some(kv::scalar(&e)?),
                "batch_source" => cfg.batch_source = kv::scalar(&e)?,
                "batch_target" => cfg.batch_target = kv::scalar(&e)?,
                "hidden" => cfg.hidden = kv::list(&e)?,
                "proj_hidden" => cfg.proj_hidden = kv::scalar(&e)?,
                "embed_dim" => cfg.embed_dim = kv::scalar(&e)?,
                "lr" => cfg.lr = kv::scalar(&e)?,
                "warmup_iters" => cfg.warmup_iters = kv::scalar(&e)?,
                "adam_beta1" => cfg.optimizer.beta1 = kv::scalar(&e)?,
                "adam_beta2" => cfg.optimizer.beta2 = kv::scalar(&e)?,
                "adam_eps" => cfg.optimizer.eps = kv::scalar(&e)?,
                "weight_decay" => cfg.optimizer.weight_decay = kv::scalar(&e)?,
                "ema_beta" => cfg.ema_beta = kv::scalar(&e)?,
                "prior_alpha" => cfg.prior_alpha = kv::scalar(&e)?,
                "proto_alpha" => cfg.proto_alpha = kv::scalar(&e)?,
                "tau" => cfg.loss.tau = kv::scalar(&e)?,
                "beta_conf" => cfg.loss.beta_conf = kv::scalar(&e)?,
                "lambda_contrast" => cfg.loss.lambda_contrast = kv::scalar(&e)?,
                "gmm_components" => cfg.gmm.n_components = kv::scalar(&e)?,
                "gmm_momentum" => cfg.gmm.momentum = kv::scalar(&e)?,
                "estep" => match e.value.as_str() {
                    "sinkhorn" => plain = false,
                    "plain" => plain = true,
                    other => return Err(Error::config("estep", format!("expected sinkhorn or plain, got `{other}`"))),
                },
                "sinkhorn_iters" => sinkhorn_iters = kv::scalar(&e)?,
                "variance_floor" => cfg.gmm.variance_floor = kv::scalar(&e)?,
                "memory_capacity" => cfg.gmm.memory_capacity = kv::scalar(&e)?,
                "memory_per_batch" => cfg.gmm.per_image_cap = kv::scalar(&e)?,
                "target_bank_capacity" => cfg.target_bank_capacity = kv::scalar(&e)?,
                "target_top_k" => cfg.target_top_k = kv::scalar(&e)?,
                "proto_mean" => {
                    cfg.proto_mean = match e.value.as_str() {
                        "bank" => PrototypeMean::Bank,
                        "batch" => PrototypeMean::Batch,
                        other => {
                            return Err(Error::config("proto_mean", format!("expected bank or batch, got `{other}`")))
                        }
                    }
                }
                "rcs_temperature" => cfg.rcs_temperature = kv::scalar(&e)?,
                "target_losses" => cfg.target_losses = kv::boolean(&e)?,
                other => return Err(Error::config(other, "unknown config key")),
            }
        }
        cfg.iter_dist = iter_dist.unwrap_or(cfg.n_iter / 10);
        cfg.gmm.estep = if plain {
            EStep::Plain
        } else {
            EStep::Sinkhorn {
                iterations: sinkhorn_iters,
            }
        };
        cfg.gmm.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the `PGMM_SEED` environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer")))?;
            self.gmm.seed = self.seed;
        }
        Ok(())
    }

    /// Full snapshot; `from_kv(to_kv())` reproduces the config.
    pub fn to_kv(&self) -> String {
        let (estep, iters) = match self.gmm.estep {
            EStep::Plain => ("plain", 0),
            EStep::Sinkhorn { iterations } => ("sinkhorn", iterations),
        };
        let proto_mean = match self.proto_mean {
            PrototypeMean::Bank => "bank",
            PrototypeMean::Batch => "batch",
        };
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.n_iter.to_string(),
            self.iter_dist.to_string(),
            self.batch_source.to_string(),
            self.batch_target.to_string(),
            kv::join(&self.hidden),
            self.proj_hidden.to_string(),
            self.embed_dim.to_string(),
            self.lr.to_string(),
            self.warmup_iters.to_string(),
            self.optimizer.beta1.to_string(),
            self.optimizer.beta2.to_string(),
            self.optimizer.eps.to_string(),
            self.optimizer.weight_decay.to_string(),
            self.ema_beta.to_string(),
            self.prior_alpha.to_string(),
            self.proto_alpha.to_string(),
            self.loss.tau.to_string(),
            self.loss.beta_conf.to_string(),
            self.loss.lambda_contrast.to_string(),
            self.gmm.n_components.to_string(),
            self.gmm.momentum.to_string(),
            estep.to_string(),
            iters.to_string(),
            self.gmm.variance_floor.to_string(),
            self.gmm.memory_capacity.to_string(),
            self.gmm.per_image_cap.to_string(),
            self.target_bank_capacity.to_string(),
            self.target_top_k.to_string(),
            proto_mean.to_string(),
            self.rcs_temperature.to_string(),
            self.target_losses.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .filter(|((k, _), _)| !(estep == "plain" && *k == "sinkhorn_iters"))
            .map(|((k, _), v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Help text listing every key with its default.
    pub fn key_help() -> String {
        let defaults = TrainConfig::default().to_kv();
        let mut out = String::from("Config keys (flat `key = value`, `#` comments):\n");
        for ((key, doc), line) in KEYS.iter().zip(defaults.lines()) {
            let default = line.split_once('=').map_or("", |(_, v)| v.trim());
            out.push_str(&format!("  {key:<22} {doc} [default: {default}]\n"));
        }
        out
    }
}
