//! Multi-prototype Gaussian-mixture domain adaptation on feature vectors.
//!
//! Source features are modeled per class by diagonal Gaussian mixtures fit
//! with momentum Sinkhorn-EM. Their components serve as prototypes for a
//! contrastive loss, and their class-conditional densities, corrected for
//! label shift, produce pseudo-labels for the unlabeled target domain.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gmm;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod priors;
pub mod proto;
pub mod viz;

pub use error::{Error, Result};
