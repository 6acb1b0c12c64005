//! Dense `f64` tensors, reverse-mode gradients and the AdamW optimizer.

mod gemm;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::{GroupId, Gradients, Param, ParamId, ParamStore, ParameterGroup};
pub use tape::{gelu_scalar, Tape, Var};
pub use tensor::Tensor;
