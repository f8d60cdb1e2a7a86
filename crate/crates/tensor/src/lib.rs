//! Dense `f64` tensors, a define-by-run reverse-mode tape, and Adam.
//!
//! Sized for networks of up to about a million parameters running on one
//! CPU thread. Values are always 64-bit so finite-difference checks can be
//! held to tight tolerances.

pub mod error;
pub mod gradcheck;
pub mod init;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
