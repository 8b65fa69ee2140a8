//! Dense f64 tensors and the hand-written kernels the model is built from.
//!
//! There is no autograd tape. Every differentiable kernel comes as a
//! forward/backward pair and the layers in [`crate::backbone`] and
//! [`crate::kvattn`] chain them explicitly.

mod gemm;
mod gradcheck;
pub mod ops;
mod rng;
mod tensor;

pub use gemm::{gemm, MatMut, MatRef};
pub use gradcheck::{check_gradients, GradCheckOptions, GradReport, TensorGradError};
pub use rng::{Rng, Stream};
pub use tensor::Tensor;
