//! Speaker-embedding training and verification at desk scale.
//!
//! The crate trains a small temporal-convolution embedding network on a
//! synthetic speaker corpus using the large-margin softmax family
//! (softmax, modified softmax, angular/additive-angular/additive-cosine
//! margins, batch-center GE2E), optionally regularized by Ring loss and
//! minimum hyperspherical energy, and evaluates verification performance
//! (EER, minDCF) with cosine scoring. Every gradient is derived by hand
//! and validated against a finite-difference oracle.
//!
//! Batch-level inner loops run data-parallel on rayon when the `parallel`
//! feature (default) is enabled; reductions always happen in a fixed order
//! so results are bit-identical across thread counts.

pub mod data;
pub mod error;
pub mod losses;
pub mod margins;
pub mod numkit;
pub mod par;

pub use error::{Error, Result};
