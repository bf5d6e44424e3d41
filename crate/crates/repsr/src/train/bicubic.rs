//! Bicubic resampling with the convention most super-resolution work
//! assumes: Catmull-Rom-style cubic with `a = -0.5`, antialiasing when
//! shrinking (the kernel is stretched by the scale factor), replicated
//! edges, and weights normalized to sum to one. Low-resolution training
//! targets and bicubic upscaling baselines both come from here, so the
//! convention matters: a different kernel shifts PSNR numbers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// The cubic interpolation kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Sampling plan for one axis: for each output index, the first source
/// index its taps touch and the normalized tap weights. Source indices are
/// clamped to the axis (edge replication), which is folded into the plan by
/// accumulating weights of out-of-range taps onto the clamped index.
fn axis_plan(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    // When shrinking, stretch the kernel by 1/scale so it averages over
    // the source pixels that map to one output pixel (antialiasing).
    let kernel_scale = scale.min(1.0);
    let support = 4.0 / kernel_scale;
    let taps = support.ceil() as isize + 2;
    let mut plan = Vec::with_capacity(out_len);
    for j in 0..out_len {
        // Continuous source coordinate of output pixel center j.
        let u = (j as f64 + 0.5) / scale - 0.5;
        let left = (u - support / 2.0).floor() as isize;
        let mut raw = Vec::with_capacity(taps as usize);
        let mut sum = 0.0;
        for t in 0..taps {
            let i = left + t;
            let w = cubic((u - i as f64) * kernel_scale);
            raw.push((i.clamp(0, in_len as isize - 1) as usize, w));
            sum += w;
        }
        // Weights of clamped taps pile up on the edge index they landed on.
        let start = raw.iter().map(|&(i, _)| i).min().expect("taps >= 1");
        let end = raw.iter().map(|&(i, _)| i).max().expect("taps >= 1");
        let mut weights = vec![0.0f64; end - start + 1];
        for (i, w) in raw {
            weights[i - start] += w / sum;
        }
        plan.push((start, weights));
    }
    plan
}

/// Resize every image plane of `img` to `(out_h, out_w)`.
///
/// Separable: the height pass runs first, then the width pass. Weights are
/// computed and applied in `f64` and rounded to the output scalar type
/// once per pixel, so results are identical across thread counts and the
/// `f32` output is the rounded `f64` result.
pub fn bicubic_resize<T: Scalar>(img: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = img.dims();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bicubic_resize",
            "output dimensions must be >= 1".to_string(),
        ));
    }
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "bicubic_resize",
            "input has an empty dimension".to_string(),
        ));
    }

    // Height pass: (h, w) -> (out_h, w), accumulating in f64.
    let vplan = axis_plan(h, out_h);
    let mut mid = vec![0.0f64; n * c * out_h * w];
    for i in 0..n {
        for ch in 0..c {
            let src = img.index(i, ch, 0, 0);
            let dst = ((i * c) + ch) * out_h * w;
            for (y, (start, weights)) in vplan.iter().enumerate() {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (t, &wt) in weights.iter().enumerate() {
                        acc += wt * img.data()[src + (start + t) * w + xx].to_f64();
                    }
                    mid[dst + y * w + xx] = acc;
                }
            }
        }
    }

    // Width pass: (out_h, w) -> (out_h, out_w).
    let hplan = axis_plan(w, out_w);
    let mut out = Tensor4::zeros([n, c, out_h, out_w]);
    for i in 0..n {
        for ch in 0..c {
            let src = ((i * c) + ch) * out_h * w;
            let dst = out.index(i, ch, 0, 0);
            for y in 0..out_h {
                for (xx, (start, weights)) in hplan.iter().enumerate() {
                    let mut acc = 0.0;
                    for (t, &wt) in weights.iter().enumerate() {
                        acc += wt * mid[src + y * w + start + t];
                    }
                    out.data_mut()[dst + y * out_w + xx] = T::from_f64(acc);
                }
            }
        }
    }
    Ok(out)
}

/// Downscale by an integer factor; the input must divide evenly.
pub fn bicubic_downscale<T: Scalar>(img: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor == 0 {
        return Err(Error::invalid(
            "bicubic_downscale",
            "factor must be >= 1".to_string(),
        ));
    }
    let [_, _, h, w] = img.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::ImageTooSmall {
            op: "bicubic_downscale",
            msg: format!("{h}x{w} not divisible by factor {factor}"),
        });
    }
    bicubic_resize(img, h / factor, w / factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_uniform, Prng};

    #[test]
    fn kernel_has_interpolation_property() {
        // cubic(0) = 1 and cubic(k) = 0 at every other integer: resizing
        // to the same size must therefore copy the input exactly.
        assert_eq!(cubic(0.0), 1.0);
        for k in [1.0, 2.0, -1.0, -2.0] {
            assert_eq!(cubic(k), 0.0);
        }
        let img = seeded_uniform::<f64>([1, 2, 5, 7], 0.0, 1.0, &mut Prng::new(1)).unwrap();
        let same = bicubic_resize(&img, 5, 7).unwrap();
        assert!(same.max_abs_diff(&img).unwrap() <= 1e-15);
    }

    #[test]
    fn weights_sum_to_one_so_constants_are_preserved() {
        let img = Tensor4::filled([1, 1, 12, 16], 0.37f64);
        for (oh, ow) in [(6, 8), (3, 4), (24, 32), (5, 7)] {
            let out = bicubic_resize(&img, oh, ow).unwrap();
            for &v in out.data() {
                assert!((v - 0.37).abs() <= 1e-12, "{oh}x{ow}: {v}");
            }
        }
    }

    #[test]
    fn linear_ramps_survive_downscaling_away_from_edges() {
        // The kernel reproduces affine functions exactly wherever edge
        // replication does not distort the ramp.
        let (h, w) = (16usize, 16usize);
        let mut img = Tensor4::<f64>::zeros([1, 1, h, w]);
        for y in 0..h {
            for xx in 0..w {
                img.set(0, 0, y, xx, xx as f64);
            }
        }
        let out = bicubic_downscale(&img, 2).unwrap();
        // Output pixel j has center u = 2j + 0.5 in source coordinates.
        for y in 2..6 {
            for j in 2..6 {
                let want = 2.0 * j as f64 + 0.5;
                assert!((out.at(0, 0, y, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_is_exact_on_ramps_and_close_on_smooth_content() {
        let (h, w) = (32usize, 32usize);

        // Affine content survives a down-up round trip exactly away from
        // the replicated edges: the downscale maps a ramp to a ramp on the
        // half-pixel-offset grid, and the upscale interpolates affine
        // functions without error. Any misalignment between the two
        // directions would show up here as a constant shift. The margin of
        // 10 keeps every tap of the upscale stencil on small-image pixels
        // whose own downscale stencils stayed inside the source.
        let mut ramp = Tensor4::<f64>::zeros([1, 1, h, w]);
        for y in 0..h {
            for xx in 0..w {
                ramp.set(0, 0, y, xx, 0.2 * y as f64 + 0.1 * xx as f64);
            }
        }
        let back = bicubic_resize(&bicubic_downscale(&ramp, 2).unwrap(), h, w).unwrap();
        for y in 10..h - 10 {
            for xx in 10..w - 10 {
                let d = (back.at(0, 0, y, xx) - ramp.at(0, 0, y, xx)).abs();
                assert!(d <= 1e-12, "ramp shifted by {d} at ({y}, {xx})");
            }
        }

        // Smooth non-affine content loses a little to the antialiasing
        // filter; only a coarse bound holds.
        let mut img = Tensor4::<f64>::zeros([1, 1, h, w]);
        for y in 0..h {
            for xx in 0..w {
                let v = 0.5
                    + 0.25 * ((y as f64) * 0.3).sin()
                    + 0.25 * ((xx as f64) * 0.2).cos();
                img.set(0, 0, y, xx, v);
            }
        }
        let small = bicubic_downscale(&img, 2).unwrap();
        let back = bicubic_resize(&small, h, w).unwrap();
        let err = back.max_abs_diff(&img).unwrap();
        assert!(err < 0.08, "round-trip error {err}");
    }

    #[test]
    fn divisibility_is_enforced() {
        let img = Tensor4::<f32>::zeros([1, 1, 9, 8]);
        assert!(matches!(
            bicubic_downscale(&img, 2).unwrap_err(),
            Error::ImageTooSmall { .. }
        ));
    }
}
