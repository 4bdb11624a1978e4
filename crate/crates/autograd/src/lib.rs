//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! Tensors are dense and row-major; image tensors use NCHW layout. A [`Tape`]
//! records operations eagerly and [`Tape::backward`] returns gradients for the
//! leaves that require them. Both `f32` and `f64` are supported so that the
//! same graph can be trained in single precision and gradient-checked in
//! double precision.

mod float;
mod kernels;
pub mod optim;
pub mod params;
mod tape;
mod tensor;

pub use float::{matmul, Float};
pub use optim::Adam;
pub use params::{Init, ParamError, ParamLayout, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
