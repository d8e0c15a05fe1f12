//! Audit multi-source image classification benchmarks for source-dataset
//! leakage.
//!
//! Classifiers are trained on scans whose center has been blacked out; any
//! remaining ability to tell corpora (or target classes) apart comes from
//! corpus-specific artifacts rather than from the diagnostically relevant
//! region.

pub mod cli;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod folds;
pub mod imaging;
pub mod learner;
pub mod metrics;
pub mod report;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
