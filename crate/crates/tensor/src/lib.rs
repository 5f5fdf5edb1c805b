//! Dense `f64` tensors with define-by-run reverse-mode automatic
//! differentiation, sized for desk-scale transformer experiments.

mod error;
pub mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::elementwise::{gelu, sigmoid};
pub use ops::shape::{strides, ZERO_INDEX};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{BackwardFault, Grads, Tape, Var};
pub use tensor::Tensor;
