//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod conv;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use conv::ConvSpec;
pub use ops::{gelu, matmul_raw, sigmoid, softplus, tanh, Unary};
pub use optim::Adam;
pub use tape::{BackwardFn, Ctx, Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;
