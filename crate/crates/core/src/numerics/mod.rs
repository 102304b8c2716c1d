//! Tensor container, special functions and the finite-difference oracle.

mod gradcheck;
mod special;
mod tensor;

pub use gradcheck::{finite_difference_gradient, GradientCheckReport, DEFAULT_STEP, RELATIVE_ERROR_FLOOR};
pub use special::{
    digamma, log_gamma, sigmoid, softplus, softplus_clipped, softplus_clipped_grad, stable_softmax, trigamma,
};
pub use tensor::Tensor;

pub(crate) use special::{ln_gamma, psi, psi1};
pub(crate) use tensor::gemm;
