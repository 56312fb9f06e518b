//! Respiratory-support trial segmentation, sequence models and evaluation.

pub mod baselines;
pub mod catalog;
pub mod config;
pub mod error;
pub mod eval;
pub mod neural;
pub mod preprocess;
pub mod synth;
pub mod trainer;
pub mod trial;

pub use error::{Error, Result};
