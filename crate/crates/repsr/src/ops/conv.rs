//! 2-D convolution, stride 1, zero padding `(k-1)/2`, kernels 1x1 and 3x3.
//!
//! The fast path lowers each sample to a column matrix (`im2col`) and runs
//! one matrix multiply per sample; 1x1 kernels skip the lowering entirely
//! because the input already *is* the column matrix. A direct nested-loop
//! implementation ([`conv2d_naive`]) is kept public as the oracle the fast
//! path is tested against.

use crate::error::{Error, Result};
use crate::tensor::{gemm_abt_accum, gemm_accum, Scalar, Tensor4};

/// Weights and bias of one convolution layer.
///
/// `weight` has dims `(c_out, c_in, k, k)`; `bias` has length `c_out`.
/// Only square 1x1 and 3x3 kernels exist in this crate, and the constructor
/// enforces that, so downstream code can match on `kernel()` exhaustively.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    /// Validate and wrap explicit weights.
    pub fn new(weight: Tensor4<T>, bias: Vec<T>) -> Result<Self> {
        let [cout, _cin, kh, kw] = weight.dims();
        if kh != kw {
            return Err(Error::invalid(
                "ConvParams::new",
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        if kh != 1 && kh != 3 {
            return Err(Error::UnsupportedKernel { k: kh });
        }
        if bias.len() != cout {
            return Err(Error::ChannelMismatch {
                op: "ConvParams::new",
                tensor: cout,
                params: bias.len(),
            });
        }
        Ok(ConvParams { weight, bias })
    }

    /// All-zero layer of the given shape.
    pub fn zeros(cout: usize, cin: usize, k: usize) -> Result<Self> {
        ConvParams::new(Tensor4::zeros([cout, cin, k, k]), vec![T::zero(); cout])
    }

    /// Output channel count.
    pub fn cout(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Input channel count.
    pub fn cin(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Kernel side length (1 or 3).
    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Zero padding applied on each side: `(k-1)/2`.
    pub fn padding(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    /// Trainable scalar count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn check_input<T: Scalar>(op: &'static str, x: &Tensor4<T>, p: &ConvParams<T>) -> Result<()> {
    if x.c() != p.cin() {
        return Err(Error::ChannelMismatch {
            op,
            tensor: x.c(),
            params: p.cin(),
        });
    }
    if x.h() == 0 || x.w() == 0 || x.n() == 0 {
        return Err(Error::invalid(op, "input has an empty dimension"));
    }
    Ok(())
}

/// Lower sample `n` of `x` into a `(c_in * 9, h * w)` column matrix for a
/// 3x3 kernel with zero padding 1. Row order is `(c, dy, dx)`, matching the
/// row-major layout of a `(c_out, c_in, 3, 3)` weight tensor flattened to
/// `(c_out, c_in * 9)`.
fn im2col3<T: Scalar>(x: &Tensor4<T>, n: usize, buf: &mut [T]) {
    let [_, cin, h, w] = x.dims();
    let hw = h * w;
    debug_assert_eq!(buf.len(), cin * 9 * hw);
    for c in 0..cin {
        let base = x.index(n, c, 0, 0);
        let src = &x.data()[base..base + hw];
        for dy in 0..3usize {
            for dx in 0..3usize {
                let row = &mut buf[(c * 9 + dy * 3 + dx) * hw..(c * 9 + dy * 3 + dx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        // reads x - 1: shift right, zero on the left edge
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src_row[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src_row),
                        // reads x + 1: shift left, zero on the right edge
                        _ => {
                            dst[..w - 1].copy_from_slice(&src_row[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Convolve `x (n, c_in, h, w)` with `p`, producing `(n, c_out, h, w)`.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    check_input("conv2d", x, p)?;
    let [n, cin, h, w] = x.dims();
    let cout = p.cout();
    let hw = h * w;
    let mut out = Tensor4::zeros([n, cout, h, w]);
    match p.kernel() {
        1 => {
            for i in 0..n {
                let xin = &x.data()[i * cin * hw..(i + 1) * cin * hw];
                let xo = &mut out.data_mut()[i * cout * hw..(i + 1) * cout * hw];
                gemm_accum(p.weight.data(), xin, xo, cout, cin, hw);
            }
        }
        3 => {
            let mut cols = vec![T::zero(); cin * 9 * hw];
            for i in 0..n {
                im2col3(x, i, &mut cols);
                let xo = &mut out.data_mut()[i * cout * hw..(i + 1) * cout * hw];
                gemm_accum(p.weight.data(), &cols, xo, cout, cin * 9, hw);
            }
        }
        k => return Err(Error::UnsupportedKernel { k }),
    }
    // Bias: one constant per output channel.
    for i in 0..n {
        for o in 0..cout {
            let b = p.bias[o];
            if b != T::zero() {
                let s = out.index(i, o, 0, 0);
                out.data_mut()[s..s + hw].iter_mut().for_each(|v| *v = *v + b);
            }
        }
    }
    out.debug_assert_finite("conv2d");
    Ok(out)
}

/// Direct nested-loop convolution. Slow; exists so the lowered fast path
/// has an independently written reference to be checked against.
pub fn conv2d_naive<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    check_input("conv2d_naive", x, p)?;
    let [n, cin, h, w] = x.dims();
    let cout = p.cout();
    let k = p.kernel();
    let pad = p.padding() as isize;
    let mut out = Tensor4::zeros([n, cout, h, w]);
    for i in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = p.bias[o];
                    for c in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = xx as isize + dx as isize - pad;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue; // zero padding
                                }
                                acc = acc
                                    + p.weight.at(o, c, dy, dx)
                                        * x.at(i, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(i, o, y, xx, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Saved forward state needed by [`conv2d_backward`].
///
/// Holds the forward input by value. Consuming the tape in the backward
/// call makes double-use a compile error rather than a silent wrong result.
#[derive(Debug)]
pub struct ConvTape<T> {
    input: Tensor4<T>,
}

impl<T: Scalar> ConvTape<T> {
    /// Dims of the recorded forward input.
    pub fn input_dims(&self) -> crate::tensor::Dims {
        self.input.dims()
    }
}

/// Forward pass that also records what the backward pass will need.
pub fn conv2d_with_tape<T: Scalar>(
    x: &Tensor4<T>,
    p: &ConvParams<T>,
) -> Result<(Tensor4<T>, ConvTape<T>)> {
    let out = conv2d(x, p)?;
    Ok((out, ConvTape { input: x.clone() }))
}

/// Gradients produced by [`conv2d_backward`].
pub struct ConvGrads<T> {
    /// Gradient with respect to the forward input.
    pub input: Tensor4<T>,
    /// Gradient with respect to the weights, same dims as the weights.
    pub weight: Tensor4<T>,
    /// Gradient with respect to the bias, one value per output channel.
    pub bias: Vec<T>,
}

/// Reverse-mode gradients of [`conv2d`].
///
/// With stride 1 and symmetric zero padding `(k-1)/2`, the input gradient
/// is itself a convolution: correlate `grad_out` with the weight tensor
/// transposed in its channel axes and flipped spatially,
/// `wt[i, o, dy, dx] = w[o, i, k-1-dy, k-1-dx]`. The weight gradient is the
/// correlation of `grad_out` with the lowered input columns, and the bias
/// gradient is a per-channel sum. Each identity is covered by finite-
/// difference tests.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    tape: ConvTape<T>,
    p: &ConvParams<T>,
) -> Result<ConvGrads<T>> {
    let x = tape.input;
    let [n, cin, h, w] = x.dims();
    let cout = p.cout();
    if grad_out.dims() != [n, cout, h, w] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            expected: [n, cout, h, w],
            got: grad_out.dims(),
        });
    }
    let k = p.kernel();
    let hw = h * w;

    // Bias gradient: sum of grad_out over (n, h, w) per output channel.
    let mut gbias = vec![T::zero(); cout];
    for i in 0..n {
        for o in 0..cout {
            let s = grad_out.index(i, o, 0, 0);
            let mut acc = T::zero();
            for &g in &grad_out.data()[s..s + hw] {
                acc = acc + g;
            }
            gbias[o] = gbias[o] + acc;
        }
    }

    // Input gradient: convolution of grad_out with the flipped transpose.
    let mut wt = Tensor4::zeros([cin, cout, k, k]);
    for o in 0..cout {
        for c in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    wt.set(c, o, dy, dx, p.weight.at(o, c, k - 1 - dy, k - 1 - dx));
                }
            }
        }
    }
    let flipped = ConvParams::new(wt, vec![T::zero(); cin])?;
    let ginput = conv2d(grad_out, &flipped)?;

    // Weight gradient: for each sample, grad_out (c_out, hw) times the
    // lowered input columns transposed, accumulated over the batch in a
    // fixed order.
    let mut gweight = Tensor4::zeros(p.weight.dims());
    match k {
        1 => {
            for i in 0..n {
                let g = &grad_out.data()[i * cout * hw..(i + 1) * cout * hw];
                let xin = &x.data()[i * cin * hw..(i + 1) * cin * hw];
                gemm_abt_accum(g, xin, gweight.data_mut(), cout, hw, cin);
            }
        }
        3 => {
            let mut cols = vec![T::zero(); cin * 9 * hw];
            for i in 0..n {
                im2col3(&x, i, &mut cols);
                let g = &grad_out.data()[i * cout * hw..(i + 1) * cout * hw];
                gemm_abt_accum(g, &cols, gweight.data_mut(), cout, hw, cin * 9);
            }
        }
        k => return Err(Error::UnsupportedKernel { k }),
    }

    Ok(ConvGrads {
        input: ginput,
        weight: gweight,
        bias: gbias,
    })
}
