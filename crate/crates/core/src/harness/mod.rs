//! Evaluation metrics, run configuration and experiment drivers.

pub mod config;
pub mod eval;
pub mod experiment;
