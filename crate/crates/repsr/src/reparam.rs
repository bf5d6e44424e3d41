//! Collapsing a trained multi-branch block into one plain 3x3 convolution.
//!
//! Once batch-norm statistics are latched, every path through a block is
//! affine, and a sum of affine convolutions is again a convolution. Three
//! small identities compose into the whole rewrite:
//!
//! 1. [`fold_bn_into_conv`]: a convolution followed by a latched norm is a
//!    convolution with rescaled weights and shifted bias.
//! 2. [`fuse_conv3x3_conv1x1`]: a 3x3 convolution followed by a 1x1 is one
//!    3x3 whose kernel is the channel-space product of the two. The order
//!    matters — see [`swapped_fusion_report`] for why the reverse
//!    composition has no exact single-kernel form under zero padding.
//! 3. [`add_identity_to_kernel`]: the identity map is a 3x3 kernel with a
//!    one at the center of its channel diagonal, so shortcuts fold in as
//!    kernel edits.
//!
//! [`collapse_block`] runs the three steps per branch and sums;
//! [`collapse_model`] maps it over a network; [`verify_equivalence`]
//! measures, on random inputs, that the rewrite changed nothing.

use crate::block::{BlockParams, BlockSpec, ResidualKind};
use crate::error::{Error, Result};
use crate::model::{Body, Model};
use crate::ops::batchnorm::{BnMode, BnParams};
use crate::ops::conv::{conv2d, ConvParams};
use crate::tensor::{batched_matmul, permute_reshape, seeded_uniform, Prng, Scalar, Tensor4};

/// A collapsed block: one 3x3 convolution with matching channel counts.
///
/// The constructor enforces the invariants (square channels, 3x3 kernel),
/// so holding a `PlainConv` is proof the layer can stand in for a block.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainConv<T> {
    conv: ConvParams<T>,
}

impl<T: Scalar> PlainConv<T> {
    /// Validate and wrap a convolution as a plain block.
    pub fn new(conv: ConvParams<T>) -> Result<Self> {
        if conv.kernel() != 3 {
            return Err(Error::invalid(
                "PlainConv::new",
                format!("plain blocks are 3x3, got {0}x{0}", conv.kernel()),
            ));
        }
        if conv.cout() != conv.cin() {
            return Err(Error::invalid(
                "PlainConv::new",
                format!(
                    "plain blocks preserve channels, got {} in / {} out",
                    conv.cin(),
                    conv.cout()
                ),
            ));
        }
        Ok(PlainConv { conv })
    }

    /// The underlying convolution.
    pub fn conv(&self) -> &ConvParams<T> {
        &self.conv
    }

    /// Mutable access for optimizer plumbing; the shape is fixed by
    /// construction so exposing the buffers cannot break the invariants.
    pub fn conv_mut(&mut self) -> &mut ConvParams<T> {
        &mut self.conv
    }

    /// Channel count on both sides.
    pub fn channels(&self) -> usize {
        self.conv.cout()
    }
}

fn require_latched<T: Scalar>(op: &'static str, bn: &BnParams<T>) -> Result<()> {
    if bn.mode == BnMode::Batch {
        return Err(Error::BnMode {
            op,
            msg: "statistics are still in Batch mode; freeze them first".into(),
        });
    }
    Ok(())
}

/// Absorb a latched batch-norm into the convolution that feeds it.
///
/// With per-channel scale `s_o = gamma_o / sqrt(var_o + eps)`, the result
/// has `w'[o, ..] = w[o, ..] * s_o` and
/// `b'_o = (b_o - mean_o) * s_o + beta_o`. Requires the norm to be latched
/// (`Frozen` or `Inference`): in `Batch` mode the stored statistics are not
/// the ones the layer actually applies, so folding them would change the
/// function.
pub fn fold_bn_into_conv<T: Scalar>(
    conv: &ConvParams<T>,
    bn: &BnParams<T>,
) -> Result<ConvParams<T>> {
    require_latched("fold_bn_into_conv", bn)?;
    if bn.channels() != conv.cout() {
        return Err(Error::ChannelMismatch {
            op: "fold_bn_into_conv",
            tensor: conv.cout(),
            params: bn.channels(),
        });
    }
    let cout = conv.cout();
    let per_out = conv.weight.len() / cout;
    let mut weight = conv.weight.clone();
    let mut bias = vec![T::zero(); cout];
    for o in 0..cout {
        let s = bn.gamma[o] / (bn.run_var[o] + bn.eps).sqrt();
        for v in &mut weight.data_mut()[o * per_out..(o + 1) * per_out] {
            *v = *v * s;
        }
        bias[o] = (conv.bias[o] - bn.run_mean[o]) * s + bn.beta[o];
    }
    ConvParams::new(weight, bias)
}

/// Merge `conv1x1(conv3x3(x))` into a single 3x3 convolution.
///
/// The 1x1 layer mixes channels pointwise, so it commutes with the spatial
/// taps: for each of the nine tap offsets, the merged kernel slice is the
/// matrix product of the 1x1 weight with that slice of the 3x3 weight.
/// Implemented exactly that way, as one batched matrix multiply over the
/// nine slices. The merged bias is the 1x1 weight applied to the 3x3 bias
/// plus the 1x1 bias.
///
/// This composition order is exact everywhere, borders included, because
/// the inner 3x3 layer sees the raw zero padding. The reverse order is
/// not collapsible — [`swapped_fusion_report`] quantifies that.
pub fn fuse_conv3x3_conv1x1<T: Scalar>(
    c3: &ConvParams<T>,
    c1: &ConvParams<T>,
) -> Result<ConvParams<T>> {
    if c3.kernel() != 3 || c1.kernel() != 1 {
        return Err(Error::invalid(
            "fuse_conv3x3_conv1x1",
            format!(
                "expected a 3x3 followed by a 1x1, got {0}x{0} then {1}x{1}",
                c3.kernel(),
                c1.kernel()
            ),
        ));
    }
    if c1.cin() != c3.cout() {
        return Err(Error::ChannelMismatch {
            op: "fuse_conv3x3_conv1x1",
            tensor: c3.cout(),
            params: c1.cin(),
        });
    }
    let (mid, cin) = (c3.cout(), c3.cin());
    let cout = c1.cout();
    let k = 3usize;

    // (mid, cin, k, k) -> (k*k, mid, cin): one channel matrix per tap.
    let taps = permute_reshape(&c3.weight, [2, 3, 0, 1], [k * k, mid, cin, 1])?;
    // (cout, mid, 1, 1) -> (1, cout, mid): broadcast over the taps.
    let mix = permute_reshape(&c1.weight, [0, 1, 2, 3], [1, cout, mid, 1])?;
    // (1, cout, mid) x (k*k, mid, cin) -> (k*k, cout, cin).
    let merged = batched_matmul(&mix, &taps)?;
    // Back to (cout, cin, k, k).
    let weight = permute_reshape(&merged, [1, 2, 0, 3], [cout, cin, k, k])?;

    // Bias: mix the inner bias through the 1x1 weight, then add its own.
    let b3 = Tensor4::from_vec([1, mid, 1, 1], c3.bias.clone())?;
    let mixed = batched_matmul(&mix, &b3)?;
    let bias: Vec<T> = mixed
        .data()
        .iter()
        .zip(&c1.bias)
        .map(|(&m, &b)| m + b)
        .collect();

    ConvParams::new(weight, bias)
}

/// Add the identity map to a square 3x3 kernel: `w[c, c, 1, 1] += 1`.
///
/// Returns the edited copy. This is how a clean shortcut enters the
/// collapsed kernel; the bias is untouched.
pub fn add_identity_to_kernel<T: Scalar>(weight: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [cout, cin, kh, kw] = weight.dims();
    if cout != cin || kh != 3 || kw != 3 {
        return Err(Error::invalid(
            "add_identity_to_kernel",
            format!("need a square-channel 3x3 kernel, got {:?}", weight.dims()),
        ));
    }
    let mut out = weight.clone();
    for c in 0..cout {
        let v = out.at(c, c, 1, 1) + T::one();
        out.set(c, c, 1, 1, v);
    }
    Ok(out)
}

/// How far the *naive* single-kernel fusion of `conv3x3(conv1x1(x))` —
/// note the order, 1x1 first — strays from the real composition.
#[derive(Debug, Clone, Copy)]
pub struct SwappedFusionReport {
    /// Largest absolute error over pixels whose 3x3 support stays inside
    /// the image. The algebra is exact here, so this is rounding-level.
    pub interior_max_diff: f64,
    /// Largest absolute error over the one-pixel border. Nonzero whenever
    /// the 1x1 bias is, because the composed network pads the *biased*
    /// intermediate with zeros while the fused kernel acts as if the bias
    /// extended past the edge.
    pub border_max_diff: f64,
}

/// Fuse in the unsupported order (`conv1x1` first, then `conv3x3`) the
/// only way a single kernel could, and measure where it breaks on `x`.
///
/// The candidate kernel `w[o, i, dy, dx] = sum_m w3[o, m, dy, dx] * w1[m, i]`
/// with bias `b_o = sum_{m, dy, dx} w3[o, m, dy, dx] * b1_m + b3_o` is the
/// unique choice that reproduces the composition away from the image edge.
/// The returned report separates interior from border error; with a
/// nonzero inner bias the border error is structural, not rounding. This
/// is why branches expand with the 3x3 first and squeeze with the 1x1
/// after — that order fuses exactly.
pub fn swapped_fusion_report<T: Scalar>(
    c1: &ConvParams<T>,
    c3: &ConvParams<T>,
    x: &Tensor4<T>,
) -> Result<SwappedFusionReport> {
    if c1.kernel() != 1 || c3.kernel() != 3 {
        return Err(Error::invalid(
            "swapped_fusion_report",
            "expected a 1x1 followed by a 3x3".to_string(),
        ));
    }
    if c3.cin() != c1.cout() {
        return Err(Error::ChannelMismatch {
            op: "swapped_fusion_report",
            tensor: c1.cout(),
            params: c3.cin(),
        });
    }
    let (mid, cin) = (c1.cout(), c1.cin());
    let cout = c3.cout();

    // True composition.
    let truth = conv2d(&conv2d(x, c1)?, c3)?;

    // Naive fused kernel: contract the channel axis, push the inner bias
    // through every tap.
    let mut weight = Tensor4::zeros([cout, cin, 3, 3]);
    for o in 0..cout {
        for i in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    let mut acc = T::zero();
                    for m in 0..mid {
                        acc = acc + c3.weight.at(o, m, dy, dx) * c1.weight.at(m, i, 0, 0);
                    }
                    weight.set(o, i, dy, dx, acc);
                }
            }
        }
    }
    let mut bias = c3.bias.clone();
    for o in 0..cout {
        let mut acc = T::zero();
        for m in 0..mid {
            let mut taps = T::zero();
            for dy in 0..3 {
                for dx in 0..3 {
                    taps = taps + c3.weight.at(o, m, dy, dx);
                }
            }
            acc = acc + taps * c1.bias[m];
        }
        bias[o] = bias[o] + acc;
    }
    let fused = conv2d(x, &ConvParams::new(weight, bias)?)?;

    // Split the comparison into interior and border.
    let [n, c, h, w] = truth.dims();
    let mut interior = 0.0f64;
    let mut border = 0.0f64;
    for ni in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let d = (truth.at(ni, ch, y, xx).to_f64()
                        - fused.at(ni, ch, y, xx).to_f64())
                    .abs();
                    let on_border = y == 0 || xx == 0 || y == h - 1 || xx == w - 1;
                    if on_border {
                        border = border.max(d);
                    } else {
                        interior = interior.max(d);
                    }
                }
            }
        }
    }
    Ok(SwappedFusionReport {
        interior_max_diff: interior,
        border_max_diff: border,
    })
}

/// Collapse one block into a single 3x3 convolution.
///
/// Per branch: fold the mid batch-norm into the expand convolution, merge
/// with the squeeze convolution, fold the after-norm if present; sum the
/// branches; then fold the shortcut in as a kernel edit (identity for a
/// clean shortcut, a diagonal scale-and-shift for a normalized one).
///
/// Errors if any batch-norm is still in `Batch` mode: the statistics to
/// bake in would not be the statistics in use.
pub fn collapse_block<T: Scalar>(
    params: &BlockParams<T>,
    spec: &BlockSpec,
) -> Result<PlainConv<T>> {
    spec.validate()?;
    for bn in params.bn_layers() {
        require_latched("collapse_block", bn)?;
    }
    let c = spec.channels;
    let mut weight = Tensor4::zeros([c, c, 3, 3]);
    let mut bias = vec![T::zero(); c];
    for br in &params.branches {
        let folded = fold_bn_into_conv(&br.conv3, &br.bn)?;
        let mut fused = fuse_conv3x3_conv1x1(&folded, &br.conv1)?;
        if let Some(bn2) = &br.bn_after {
            fused = fold_bn_into_conv(&fused, bn2)?;
        }
        weight.add_assign(&fused.weight)?;
        for (b, &f) in bias.iter_mut().zip(&fused.bias) {
            *b = *b + f;
        }
    }
    match spec.residual {
        ResidualKind::Clean => {
            weight = add_identity_to_kernel(&weight)?;
        }
        ResidualKind::WithBn => {
            // bn(x) is per-channel affine: scale on the kernel diagonal's
            // center tap, shift on the bias.
            let rbn = params.residual_bn.as_ref().ok_or(Error::ModelStructure {
                op: "collapse_block",
                msg: "spec says WithBn but the shortcut norm is missing".into(),
            })?;
            for ch in 0..c {
                let s = rbn.gamma[ch] / (rbn.run_var[ch] + rbn.eps).sqrt();
                let v = weight.at(ch, ch, 1, 1) + s;
                weight.set(ch, ch, 1, 1, v);
                bias[ch] = bias[ch] + rbn.beta[ch] - rbn.run_mean[ch] * s;
            }
        }
        ResidualKind::None => {}
    }
    PlainConv::new(ConvParams::new(weight, bias)?)
}

/// Collapse every block of a training-form model, leaving head, tail, and
/// activations untouched. The result computes the same function.
pub fn collapse_model<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    let blocks = match &model.body {
        Body::Training(blocks) => blocks,
        Body::Plain(_) => {
            return Err(Error::ModelStructure {
                op: "collapse_model",
                msg: "model is already in plain form".into(),
            })
        }
    };
    let mut plain = Vec::with_capacity(blocks.len());
    for params in blocks {
        plain.push(collapse_block(params, &model.spec.block)?);
    }
    Ok(Model {
        spec: model.spec.clone(),
        head: model.head.clone(),
        acts: model.acts.clone(),
        body: Body::Plain(plain),
        tail: model.tail.clone(),
    })
}

/// Outcome of [`verify_equivalence`].
#[derive(Debug, Clone, Copy)]
pub struct EquivalenceReport {
    /// Largest elementwise difference seen across all trials.
    pub max_abs_diff: f64,
    /// The tolerance the difference was compared against.
    pub tolerance: f64,
    /// How many random inputs were evaluated.
    pub trials: usize,
    /// `max_abs_diff <= tolerance`. Vacuously true when `trials == 0`.
    pub pass: bool,
    /// True when no trials ran, so `pass` asserts nothing.
    pub vacuous: bool,
}

impl std::fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.vacuous {
            return write!(f, "vacuous pass: 0 trials requested, nothing verified");
        }
        write!(
            f,
            "{}: max |diff| = {:.3e} over {} trials (tolerance {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_abs_diff,
            self.trials,
            self.tolerance
        )
    }
}

/// Default verification tolerance for a scalar type: `1e-5` for `f32`,
/// `1e-10` for `f64`.
pub fn default_tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        crate::tensor::Dtype::F32 => 1e-5,
        crate::tensor::Dtype::F64 => 1e-10,
    }
}

/// Feed both models the same random inputs and report the largest output
/// difference.
///
/// Inputs are uniform on `[-1, 1)` with batch 1 and varying, deliberately
/// non-square spatial sizes, so border handling is exercised on every
/// trial. Passing `trials == 0` yields a vacuous pass with a flag set —
/// callers (and the CLI) surface that loudly rather than calling it
/// verified.
pub fn verify_equivalence<T: Scalar>(
    a: &Model<T>,
    b: &Model<T>,
    trials: usize,
    tolerance: Option<f64>,
    rng: &mut Prng,
) -> Result<EquivalenceReport> {
    if a.spec != b.spec {
        return Err(Error::ModelStructure {
            op: "verify_equivalence",
            msg: "models have different specs".into(),
        });
    }
    let tol = tolerance.unwrap_or_else(default_tolerance::<T>);
    if trials == 0 {
        return Ok(EquivalenceReport {
            max_abs_diff: 0.0,
            tolerance: tol,
            trials: 0,
            pass: true,
            vacuous: true,
        });
    }
    let colors = a.spec.colors;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let h = 7 + rng.index(10);
        let w = 7 + rng.index(12);
        let x = seeded_uniform::<T>([1, colors, h, w], -1.0, 1.0, rng)?;
        let ya = a.forward(&x)?;
        let yb = b.forward(&x)?;
        worst = worst.max(ya.max_abs_diff(&yb)?);
    }
    Ok(EquivalenceReport {
        max_abs_diff: worst,
        tolerance: tol,
        trials,
        pass: worst <= tol,
        vacuous: false,
    })
}
