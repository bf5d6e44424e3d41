//! Network building blocks: convolution, batch norm, PReLU, resampling,
//! and the L1 loss, each paired with a hand-derived backward pass.
//!
//! Every op follows the same contract: a pure forward function, a
//! `*_with_tape` variant that additionally returns the saved state the
//! backward pass needs, and a backward function that consumes that tape by
//! value (so a tape cannot be replayed against the wrong forward) and
//! returns gradients for the input and for each parameter.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod resample;

pub use activation::{
    prelu, prelu_backward, prelu_with_tape, PreluGrads, PreluParams, PreluTape, PRELU_INIT_SLOPE,
};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_with_tape, batchnorm_infer, BnGrads,
    BnMode, BnParams, BnTape, BN_EPS, BN_MOMENTUM,
};
pub use conv::{
    conv2d, conv2d_backward, conv2d_naive, conv2d_with_tape, ConvGrads, ConvParams, ConvTape,
};
pub use loss::{l1_loss, l1_loss_backward};
pub use resample::{
    nearest_upsample, nearest_upsample_backward, pixel_shuffle, pixel_shuffle_backward,
};
