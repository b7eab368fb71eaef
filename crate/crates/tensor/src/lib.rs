//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! Values live on a [`Tape`]; each primitive runs eagerly and records how
//! to push gradients back to its operands. Trainable tensors live in a
//! [`ParamStore`] and are copied onto the tape with [`Tape::bind`].

pub mod error;
pub mod float;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Bound, Gradients, Tape, UpsampleMode, Var};
pub use tensor::Tensor;
