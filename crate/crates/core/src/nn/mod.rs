//! Dense tensors, neural network kernels and gradient checking.

pub mod gradcheck;
pub mod linalg;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, sample_coords};
pub use ops::{argmax, cross_entropy, log_softmax, rms_norm, softmax, Rope, RMS_EPS};
pub use scalar::Scalar;
pub use tensor::{Parameter, Tensor};
