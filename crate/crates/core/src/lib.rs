//! Desk-scale laboratory for trigger-aware prompt-learning backdoors on
//! frozen two-tower vision-language models.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`finite_diff`], [`optim`]: a small reverse-mode autodiff
//!   substrate with an SGD optimizer and an independent gradient oracle.
//! - [`corpus`]: a procedural paired image/class-name corpus with class
//!   splits, few-shot sampling, and domain-shifted variants.
//! - [`model`]: the frozen victim — image/text encoders, contrastive
//!   pre-training, and zero-shot inference.
//! - [`prompt`]: learned prompt machinery — the image-conditioned context
//!   generator and the static-context baseline.
//! - [`attack`]: the bounded additive trigger, its losses, and the two-stage
//!   (warm-up then joint) optimization.
//! - [`eval`]: accuracy / attack-success metrics, stealth scores, similarity
//!   decoupling, retrieval, and feature export.
//! - [`defense`]: patch-trigger reconstruction with anomaly scoring, and
//!   data-free channel-Lipschitz pruning.
//! - [`container`]: the shared checkpoint / array file format.

pub mod attack;
pub mod container;
pub mod corpus;
pub mod defense;
pub mod eval;
pub mod finite_diff;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod text;

pub use scalar::{Dtype, Scalar};
pub use tensor::{Graph, TensorError, Var};
