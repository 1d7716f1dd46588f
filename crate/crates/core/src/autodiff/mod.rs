//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod gru;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, TensorCheck};
pub use gru::{gru_cell, GruWeights, GRU_PARAM_NAMES};
pub use params::{ParamStore, Parameter};
pub use tape::{BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::Tensor;
