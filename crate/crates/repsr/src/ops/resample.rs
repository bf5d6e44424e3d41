//! Resolution-changing rearrangements: pixel shuffle (depth to space) and
//! nearest-neighbor upsampling. Both are parameter-free permutations or
//! replications, so their backward passes are exact rearrangements too and
//! need no tape.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

fn check_scale(op: &'static str, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::invalid(op, "scale factor must be >= 1"));
    }
    Ok(())
}

/// Rearrange `(n, c*r^2, h, w)` into `(n, c, h*r, w*r)`.
///
/// Output pixel `(y*r + dy, x*r + dx)` of channel `c` reads input channel
/// `c*r^2 + dy*r + dx` at `(y, x)`: each group of `r^2` consecutive input
/// channels becomes one `r x r` cell of the output.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    check_scale("pixel_shuffle", r)?;
    let [n, c_in, h, w] = x.dims();
    if c_in % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channels {c_in} not divisible by r^2 = {}", r * r),
        ));
    }
    let c = c_in / (r * r);
    let mut out = Tensor4::zeros([n, c, h * r, w * r]);
    for i in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src_c = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            out.set(i, ch, y * r + dy, xx * r + dx, x.at(i, src_c, y, xx));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse rearrangement of [`pixel_shuffle`]: scatter the output
/// gradient back onto the `r^2` channel groups.
pub fn pixel_shuffle_backward<T: Scalar>(grad_out: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    check_scale("pixel_shuffle_backward", r)?;
    let [n, c, hr, wr] = grad_out.dims();
    if hr % r != 0 || wr % r != 0 {
        return Err(Error::invalid(
            "pixel_shuffle_backward",
            format!("spatial dims {hr}x{wr} not divisible by r = {r}"),
        ));
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor4::zeros([n, c * r * r, h, w]);
    for i in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let dst_c = ch * r * r + dy * r + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            out.set(i, dst_c, y, xx, grad_out.at(i, ch, y * r + dy, xx * r + dx));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Replicate each pixel into an `r x r` cell: `(n, c, h, w)` to
/// `(n, c, h*r, w*r)` with `out[y, x] = in[y / r, x / r]`.
pub fn nearest_upsample<T: Scalar>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    check_scale("nearest_upsample", r)?;
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, c, h * r, w * r]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h * r {
                let sy = y / r;
                for xx in 0..w * r {
                    out.set(i, ch, y, xx, x.at(i, ch, sy, xx / r));
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`nearest_upsample`]: each input pixel fans out to `r^2`
/// outputs, so its gradient is the sum over its cell.
pub fn nearest_upsample_backward<T: Scalar>(grad_out: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    check_scale("nearest_upsample_backward", r)?;
    let [n, c, hr, wr] = grad_out.dims();
    if hr % r != 0 || wr % r != 0 {
        return Err(Error::invalid(
            "nearest_upsample_backward",
            format!("spatial dims {hr}x{wr} not divisible by r = {r}"),
        ));
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor4::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..hr {
                for xx in 0..wr {
                    let v = out.at(i, ch, y / r, xx / r) + grad_out.at(i, ch, y, xx);
                    out.set(i, ch, y / r, xx / r, v);
                }
            }
        }
    }
    Ok(out)
}
