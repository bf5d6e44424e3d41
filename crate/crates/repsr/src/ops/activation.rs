//! PReLU: identity for non-negative inputs, a learned per-channel slope
//! for negative ones.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Default initial negative-half slope.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Learned per-channel negative-half slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreluParams<T> {
    pub slope: Vec<T>,
}

impl<T: Scalar> PreluParams<T> {
    /// One slope per channel, all set to the default initial value.
    pub fn new(channels: usize) -> Self {
        PreluParams {
            slope: vec![T::from_f64(PRELU_INIT_SLOPE); channels],
        }
    }

    /// Channel count.
    pub fn channels(&self) -> usize {
        self.slope.len()
    }

    fn check(&self, op: &'static str, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.channels() {
            return Err(Error::ChannelMismatch {
                op,
                tensor: x.c(),
                params: self.channels(),
            });
        }
        Ok(())
    }
}

/// `y = x` for `x >= 0`, `y = slope_c * x` otherwise.
pub fn prelu<T: Scalar>(x: &Tensor4<T>, p: &PreluParams<T>) -> Result<Tensor4<T>> {
    p.check("prelu", x)?;
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros(x.dims());
    for i in 0..n {
        for ch in 0..c {
            let s = x.index(i, ch, 0, 0);
            let a = p.slope[ch];
            for k in 0..hw {
                let v = x.data()[s + k];
                out.data_mut()[s + k] = if v >= T::zero() { v } else { a * v };
            }
        }
    }
    Ok(out)
}

/// Saved forward state for [`prelu_backward`]: the input itself, which
/// determines both the sign mask and the slope gradient.
#[derive(Debug)]
pub struct PreluTape<T> {
    input: Tensor4<T>,
}

/// Forward pass that also records what the backward pass will need.
pub fn prelu_with_tape<T: Scalar>(
    x: &Tensor4<T>,
    p: &PreluParams<T>,
) -> Result<(Tensor4<T>, PreluTape<T>)> {
    let out = prelu(x, p)?;
    Ok((out, PreluTape { input: x.clone() }))
}

/// Gradients produced by [`prelu_backward`].
pub struct PreluGrads<T> {
    /// Gradient with respect to the input.
    pub input: Tensor4<T>,
    /// Gradient with respect to the per-channel slopes.
    pub slope: Vec<T>,
}

/// Reverse-mode gradients: `dx = dy` where the input was non-negative and
/// `dy * slope_c` elsewhere; `d(slope_c)` collects `dy * x` over the
/// negative positions of channel `c`. At exactly zero the identity branch
/// applies, matching the forward convention `x >= 0`.
pub fn prelu_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    tape: PreluTape<T>,
    p: &PreluParams<T>,
) -> Result<PreluGrads<T>> {
    p.check("prelu_backward", grad_out)?;
    if grad_out.dims() != tape.input.dims() {
        return Err(Error::ShapeMismatch {
            op: "prelu_backward",
            expected: tape.input.dims(),
            got: grad_out.dims(),
        });
    }
    let [n, c, h, w] = grad_out.dims();
    let hw = h * w;
    let mut ginput = Tensor4::zeros(grad_out.dims());
    let mut gslope = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let s = grad_out.index(i, ch, 0, 0);
            let a = p.slope[ch];
            let mut acc = T::zero();
            for k in 0..hw {
                let x = tape.input.data()[s + k];
                let dy = grad_out.data()[s + k];
                if x >= T::zero() {
                    ginput.data_mut()[s + k] = dy;
                } else {
                    ginput.data_mut()[s + k] = dy * a;
                    acc = acc + dy * x;
                }
            }
            gslope[ch] = gslope[ch] + acc;
        }
    }
    Ok(PreluGrads {
        input: ginput,
        slope: gslope,
    })
}
