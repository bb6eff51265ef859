//! Control stack for persona-grounded open-domain dialogue.
//!
//! The crate covers the whole offline pipeline: a multi-session corpus model
//! and synthetic generator, instance-level weighted blending, negative persona
//! augmentation, prompt serialization with response-type labels, a small
//! decoder-only transformer trained from scratch, evaluation metrics, and the
//! lexical persona retriever used at inference time.
//!
//! Numeric model code is generic over [`Scalar`] (`f32` for training and
//! serving, `f64` for gradient checks); the aliases below pick the common
//! instantiations.

pub mod augment;
pub mod blending;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod serialize;
pub mod synth;
pub mod text;
pub mod vocab;

pub use corpus::{Corpus, Episode, PersonaAttribute, Rtl, Session, Speaker, Turn};
pub use scalar::Scalar;

/// Transformer with single-precision parameters (training and inference).
pub type Transformer = model::Transformer<f32>;
/// Transformer with double-precision parameters (numerical checks).
pub type Transformer64 = model::Transformer<f64>;
/// Checkpoint of a single-precision model.
pub type Checkpoint = model::Checkpoint<f32>;
/// Checkpoint of a double-precision model.
pub type Checkpoint64 = model::Checkpoint<f64>;
