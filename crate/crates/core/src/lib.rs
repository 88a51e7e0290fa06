//! CrossNorm + SelfNorm normalization for visual reinforcement learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: tensors, conv/linear/relu kernels with backward passes,
//!   a splittable PRNG, finite-difference checking and checkpoints.
//! - [`normlayers`]: CrossNorm, SelfNorm and BatchNorm.
//! - [`encoder`]: the convolutional encoder with normalization blocks.
//! - [`pixelworld`]: a rendered grid task with visual shift suites.
//! - [`agent`]: a DQN agent with random-shift augmentation.
//! - [`harness`]: training runs, evaluation, ablations and reporting.

pub mod agent;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod normlayers;
pub mod numcore;
pub mod pixelworld;

pub use error::{Error, Result};
pub use normlayers::Mode;
pub use numcore::{Prng, Real, Tensor};
