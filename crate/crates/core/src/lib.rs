//! Dynamic feature aggregation for robust, compact embeddings.
//!
//! Train a feature extractor against a frozen orthogonal cosine classifier
//! while pulling sample pairs toward the embedding of their convex mixture,
//! then probe the result with white-box attacks, angle-based
//! out-of-distribution scoring, and embedding-space diagnostics.
//!
//! Start with [`trainer::train`], [`attacks::evaluate_robustness`] and
//! [`ood::evaluate_ood`]; the crate's `examples/` directory has one runnable
//! program per capability.

pub mod aggregation;
pub mod analysis;
pub mod data;
pub mod attacks;
pub mod error;
pub mod harness;
pub mod head;
pub mod lossless;
pub mod mixing;
pub mod model;
pub mod ood;
pub mod rng;
pub mod trainer;

pub use error::{DfaError, Result};
