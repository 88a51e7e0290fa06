//! Dense tensors, kernels, seeded randomness and verification helpers.

pub mod checkpoint;
mod gradcheck;
mod ops;
mod real;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, grad_check_piecewise, relative_error, GradCheckReport};
pub use ops::{
    conv2d, conv2d_backward, conv2d_backward_cached, conv2d_forward, huber, linear, linear_backward, relu,
    relu_backward, ConvCache, ConvGeometry,
};
pub use real::Real;
pub use rng::Prng;
pub use tensor::Tensor;
