//! Mean embeddings with test-time augmentation.
//!
//! A small convolutional backbone is trained under augmentation; at
//! inference its global-pooled embedding is averaged over augmented copies
//! of the input and fed to a linear head. The crate also carries the
//! conventional probability-averaging baseline, a multi-scale retrieval
//! index and the diagnostics used to compare them.

pub mod analysis;
mod binio;
pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
