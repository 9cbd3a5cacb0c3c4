//! Learning a sample-level classifier from class-proportion priors.
//!
//! The crate couples an entropic optimal-transport code solver whose row
//! marginals are the known (or estimated) class proportions with a
//! swapped-prediction prototype clustering loop. Around that core sit bag
//! construction for the supported supervision modes, synthetic data
//! generators, and the clustering/classification metrics used to score runs.
//!
//! Module map:
//!
//! - [`ot`]: proportion-constrained Sinkhorn codes, entropy, hardening, and an
//!   exhaustive oracle for the zero-temperature limit.
//! - [`model`]: MLP encoder, prototype bank, softmax head, analytic backward.
//! - [`loss`]: swapped cross-entropy between views and bag-level diagnostics.
//! - [`bagging`]: epoch bags and proportion priors.
//! - [`datagen`]: blobs, patch rasters, augmentation, masking, dataset files.
//! - [`trainer`]: the training loop, schedule and checkpoints.
//! - [`eval`]: Hungarian accuracy, NMI, ARI, kNN probe, k-means, class maps.

pub mod bagging;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod ot;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
