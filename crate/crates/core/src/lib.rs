//! Sparse latent dynamics: a convolutional autoencoder whose latent space is
//! modeled by an l1-regularized VAR(p), fitted by a differentiable LARS
//! homotopy inside every forward pass.

// Guards like `!(x > 0.0)` are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autoencoder;
pub mod config;
pub mod contribution;
pub mod error;
pub mod format;
pub mod lars;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod var;

pub use error::{Error, Result};
pub use tensor::{Gradients, PoolIndices, Tape, Tensor, Var};
