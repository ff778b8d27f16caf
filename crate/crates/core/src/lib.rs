//! Associative domain adaptation.
//!
//! A classifier trained on a labeled source domain is pushed to embed an
//! unlabeled target domain alongside it by an association loss: random
//! walks that step from source embeddings to target embeddings and back
//! should return to the class they started in (walker loss) while visiting
//! every target sample equally often (visit loss).
//!
//! The crate provides the losses with analytic gradients ([`assoc`]), an
//! RBF-kernel MMD baseline ([`mmd`]), a small feed-forward network with
//! backpropagation ([`network`]), synthetic domain pairs and samplers
//! ([`data`]), the training/evaluation harness ([`harness`]), experiment
//! configuration files ([`config`]) and finite-difference gradient
//! verification ([`gradcheck`]).

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assoc;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod mmd;
pub mod network;

pub use assoc::{
    assoc_forward_backward, AssocConfig, AssocResult, EmbeddingBatch, LabelVector, StochasticMatrix,
};
pub use config::ExperimentConfig;
pub use error::{Error, IdxError, Result};
pub use linalg::Matrix;
pub use mmd::{mmd2, Estimator, MmdConfig, MmdResult};
pub use network::{Activation, MlpParams, MlpSpec};
