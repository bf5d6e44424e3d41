//! Train multi-branch super-resolution networks, then collapse every block
//! into a single 3x3 convolution with no change in the computed function.
//!
//! The crate implements one idea end to end: a VGG-style super-resolution
//! network can be *trained* in an over-parameterized form — each body block
//! a sum of expand-then-squeeze convolution branches plus a residual path —
//! and *deployed* as a plain stack of single 3x3 convolutions. Because
//! every branch is linear once its batch-norm statistics are frozen, the
//! collapse is an algebraic identity, not an approximation: the plain
//! network reproduces the trained one to floating-point rounding.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: owned `(n, c, h, w)` tensors, seeded randomness, batched
//!   matmul.
//! - [`ops`]: convolution, batch norm with three statistics modes, PReLU,
//!   pixel shuffle, nearest upsampling, L1 loss — each with a hand-derived
//!   backward pass.
//! - [`block`]: the multi-branch residual block used during training.
//! - [`reparam`]: the fusion algebra (fold batch norm, merge 3x3 with 1x1,
//!   inject identities) and the equivalence verifier.
//! - [`model`]: the full network in either form, with cost accounting.
//! - [`train`]: bicubic downscaling, patch sampling, Adam, learning-rate
//!   schedules, the training loop, and the late-freeze step.
//! - [`diagnostics`]: PSNR, batch-norm statistics traces, and the
//!   patch-paste locality probe.
//! - [`weights`]: the `RPSR` weight-file format.
//!
//! Everything is CPU-only, dependency-light, and deterministic: a fixed
//! seed reproduces a training run bit for bit at any thread count.

pub mod block;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod ops;
pub mod reparam;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Dims, Dtype, Prng, Scalar, Tensor4};

#[cfg(doctest)]
mod book;
