pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nets;
pub mod pipeline;
pub mod projector;
pub mod reward;
pub mod stats;
pub mod testbed;

pub use error::{Error, Result};
