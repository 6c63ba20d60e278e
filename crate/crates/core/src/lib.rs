//! Latent prompt transformer for black-box sequence optimization.

pub mod dso;
pub mod error;
pub mod harness;
pub mod model;
pub mod oracles;
pub mod sampler;
pub mod seqcore;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
