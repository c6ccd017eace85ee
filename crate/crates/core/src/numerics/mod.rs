//! Dense tensors, the fixed set of differentiable kernels the pipeline
//! needs, finite-difference gradient checking and the `MCT1` file format.

pub mod gradcheck;
pub mod io;
pub mod ops;
mod tensor;

pub use gradcheck::{grad_check, Differentiable, FnObjective, GradCheckReport};
pub use io::Precision;
pub use ops::{affine_1x1, matmul, one_hot, softmax, upsample, UpsampleMode};
pub use tensor::{Parameter, Tensor};
