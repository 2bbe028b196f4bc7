//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod check;
pub(crate) mod gemm;
mod tape;
mod tensor;

pub use check::{check_gradient, FD_STEP};
pub use tape::{ConvSpec, Gradients, Tape, Var};
pub use tensor::{Param, ParamId, Tensor};
