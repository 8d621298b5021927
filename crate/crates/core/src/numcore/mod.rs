//! Dense tensors, a reverse-mode tape, Adam, finite differences and the
//! embedding file format.

pub mod embio;
pub mod fd;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use fd::{finite_difference_gradient, max_relative_error};
pub use optim::{optimizer_step, Adam, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax, softmax_slice, Tensor};
