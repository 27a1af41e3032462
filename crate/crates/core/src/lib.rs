//! Probabilistic embeddings for words, documents, and arbitrary metadata
//! modalities, learned by factorizing word co-occurrence counts with a
//! regularized multimodal online EM algorithm.
//!
//! The model approximates p(u|v) = sum_t phi_ut theta_tv over pairs of
//! tokens co-occurring in sliding windows, treating each pivot word as a
//! pseudo-document. Phi columns are probability distributions per modality,
//! which makes the components directly interpretable; a cross-entropy
//! sparsing regularizer drives most entries to exact zeros without hurting
//! similarity quality.
//!
//! The pipeline runs corpus → vocabulary → co-occurrence → pseudo-document
//! batches → online EM → evaluation (word similarity, topic coherence,
//! document triplets); see [`pipeline`] and the `pwe` CLI.
//!
//! All numerics are generic over the [`Scalar`] floating-point type; the
//! aliases below fix the default `f64` used by the CLI and file formats.

pub mod batch;
pub mod cooc;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used by the CLI and the on-disk formats.
pub type DefaultScalar = f64;

/// f64-backed aliases for the main artifact types.
pub type Cooc = cooc::CoocStore<DefaultScalar>;
pub type Batch = batch::Batch<DefaultScalar>;
pub type PseudoDoc = batch::PseudoDocument<DefaultScalar>;
pub type Phi = trainer::PhiMatrix<DefaultScalar>;
pub type Trainer = trainer::OnlineTrainer<DefaultScalar>;
pub type Model = model::TrainedModel<DefaultScalar>;
pub type Embedding = model::Embedding<DefaultScalar>;
