//! Continual learning of domain-invariant representations.
//!
//! A small MLP `h = g ∘ f` is trained over an ordered stream of labelled
//! source domains. Replay batches from a domain-partitioned memory buffer let
//! invariance penalties (risk variance, gradient variance, feature moments,
//! kernel mean embeddings, gradient sign agreement) be evaluated across
//! domains within a single update, and stored per-domain priors anchor the
//! replayed statistics to their original values. Generalization is measured
//! on a held-out target domain.

pub mod autodiff;
pub mod buffer;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod penalties;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Identifier of a domain within a stream. Sources are numbered from 1.
pub type DomainId = u32;
