//! Measurement instruments: Y-channel PSNR, per-layer batch-norm
//! statistics traces, and the patch-paste locality probe.
//!
//! The statistics trace and the paste probe exist to study one failure
//! mode: when a network normalizes with *population* statistics but a
//! particular input produces features whose *instance* statistics sit far
//! from them, the normalized features are out of distribution and the
//! output degrades locally. The trace quantifies the gap layer by layer;
//! the paste probe demonstrates its locality by splicing a problematic
//! patch into a healthy image and mapping where the output changes.

use crate::block::{BlockParams, ResidualKind};
use crate::error::{Error, Result};
use crate::model::{Body, Model, ModelSpec};
use crate::ops::activation::prelu;
use crate::ops::batchnorm::{batch_stats, batchnorm_infer};
use crate::ops::conv::conv2d;
use crate::tensor::{Scalar, Tensor4};

/// BT.601 luma on the 0–255 scale: `Y = 65.481 R + 128.553 G + 24.966 B + 16`
/// for RGB in `[0, 1]`. White maps to 235, black to 16.
pub fn rgb_to_y<T: Scalar>(img: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, c, h, w] = img.dims();
    if c != 3 {
        return Err(Error::ChannelMismatch {
            op: "rgb_to_y",
            tensor: c,
            params: 3,
        });
    }
    let mut out = Tensor4::zeros([n, 1, h, w]);
    let plane = h * w;
    for i in 0..n {
        let r0 = img.index(i, 0, 0, 0);
        let g0 = img.index(i, 1, 0, 0);
        let b0 = img.index(i, 2, 0, 0);
        let o0 = out.index(i, 0, 0, 0);
        for p in 0..plane {
            let r = img.data()[r0 + p].to_f64();
            let g = img.data()[g0 + p].to_f64();
            let b = img.data()[b0 + p].to_f64();
            let y = 65.481 * r + 128.553 * g + 24.966 * b + 16.0;
            out.data_mut()[o0 + p] = T::from_f64(y);
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB: `10 log10(peak^2 / MSE)`, accumulated
/// in `f64`. Identical inputs return `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, peak: f64) -> Result<f64> {
    psnr_cropped(a, b, peak, 0)
}

/// [`psnr`] with `crop` pixels ignored on every spatial border — the
/// standard convention for super-resolution scores, where the border is
/// dominated by padding effects.
pub fn psnr_cropped<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    peak: f64,
    crop: usize,
) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            expected: a.dims(),
            got: b.dims(),
        });
    }
    let [n, c, h, w] = a.dims();
    if h <= 2 * crop || w <= 2 * crop {
        return Err(Error::invalid(
            "psnr",
            format!("crop {crop} leaves no pixels of a {h}x{w} image"),
        ));
    }
    let mut acc = 0.0f64;
    for i in 0..n {
        for ch in 0..c {
            for y in crop..h - crop {
                let row = a.index(i, ch, y, 0);
                for x in crop..w - crop {
                    let d = a.data()[row + x].to_f64() - b.data()[row + x].to_f64();
                    acc += d * d;
                }
            }
        }
    }
    let count = (n * c * (h - 2 * crop) * (w - 2 * crop)) as f64;
    let mse = acc / count;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Luma PSNR with a border crop, dispatching on channel count: RGB pairs
/// are converted with [`rgb_to_y`] and scored against peak 255, while
/// single-channel pairs (already in `[0, 1]`) are scored against peak 1 —
/// the same decibel value either way.
pub fn y_psnr<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, crop: usize) -> Result<f64> {
    if a.c() == 3 && b.c() == 3 {
        psnr_cropped(&rgb_to_y(a)?, &rgb_to_y(b)?, 255.0, crop)
    } else {
        psnr_cropped(a, b, 1.0, crop)
    }
}

/// One batch-norm layer's statistics snapshot for a probe input.
///
/// "Instance" statistics are the per-channel mean and biased variance of
/// the feature map entering the layer, computed over `(n, h, w)` for the
/// probe; "population" statistics are the layer's stored running
/// estimates. Each field is the L1 norm (sum of absolute values) of the
/// corresponding per-channel vector. A healthy input keeps the instance
/// norms near the population norms; a large gap marks the layer where
/// normalization goes wrong.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnStatsRow {
    /// Position in [`Model::bn_layers`] order.
    pub layer_index: usize,
    /// L1 norm of the per-channel instance mean of the layer's input.
    pub mean_l1_inst: f64,
    /// L1 norm of the per-channel instance variance of the layer's input.
    pub var_l1_inst: f64,
    /// L1 norm of the stored running mean.
    pub mean_l1_pop: f64,
    /// L1 norm of the stored running variance.
    pub var_l1_pop: f64,
}

/// Column header matching [`BnStatsRow::to_csv`].
pub const BN_STATS_CSV_HEADER: &str = "layer_index,mean_l1_inst,var_l1_inst,mean_l1_pop,var_l1_pop";

impl BnStatsRow {
    /// CSV encoding, matching [`BN_STATS_CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.layer_index, self.mean_l1_inst, self.var_l1_inst, self.mean_l1_pop, self.var_l1_pop
        )
    }
}

fn stats_row<T: Scalar>(
    layer_index: usize,
    input: &Tensor4<T>,
    bn: &crate::ops::batchnorm::BnParams<T>,
) -> BnStatsRow {
    let (mean, var) = batch_stats(input);
    BnStatsRow {
        layer_index,
        mean_l1_inst: mean.iter().map(|m| m.abs()).sum(),
        var_l1_inst: var.iter().map(|v| v.abs()).sum(),
        mean_l1_pop: bn.run_mean.iter().map(|&m| m.to_f64().abs()).sum(),
        var_l1_pop: bn.run_var.iter().map(|&v| v.to_f64().abs()).sum(),
    }
}

/// Walk one block the way inference does, recording a [`BnStatsRow`] for
/// the tensor entering each batch-norm layer, in [`BlockParams::bn_layers`]
/// order. Returns the block output (before the activation that follows it).
fn trace_block<T: Scalar>(
    x: &Tensor4<T>,
    block: &BlockParams<T>,
    spec: &crate::block::BlockSpec,
    rows: &mut Vec<BnStatsRow>,
) -> Result<Tensor4<T>> {
    let mut sum: Option<Tensor4<T>> = None;
    for br in &block.branches {
        let t3 = conv2d(x, &br.conv3)?;
        rows.push(stats_row(rows.len(), &t3, &br.bn));
        let mid = batchnorm_infer(&t3, &br.bn)?;
        let mut t1 = conv2d(&mid, &br.conv1)?;
        if let Some(bn2) = &br.bn_after {
            rows.push(stats_row(rows.len(), &t1, bn2));
            t1 = batchnorm_infer(&t1, bn2)?;
        }
        sum = Some(match sum {
            None => t1,
            Some(s) => s.add(&t1)?,
        });
    }
    let mut out = sum.expect("spec guarantees at least one branch");
    match spec.residual {
        ResidualKind::Clean => out = out.add(x)?,
        ResidualKind::WithBn => {
            let rbn = block.residual_bn.as_ref().ok_or(Error::ModelStructure {
                op: "bn_stats_trace",
                msg: "residual kind WithBn but no residual_bn present".into(),
            })?;
            rows.push(stats_row(rows.len(), x, rbn));
            out = out.add(&batchnorm_infer(x, rbn)?)?;
        }
        ResidualKind::None => {}
    }
    Ok(out)
}

/// Per-layer statistics trace of a training-form model over a probe input.
///
/// Runs the feature path with stored statistics (deployment semantics,
/// nothing mutated) and records one [`BnStatsRow`] per batch-norm layer in
/// [`Model::bn_layers`] order. The row count always equals the layer
/// count. A model whose statistics were just recalibrated on `x` itself
/// shows instance and population norms agreeing to well under `1e-4`.
pub fn bn_stats_trace<T: Scalar>(model: &Model<T>, x: &Tensor4<T>) -> Result<Vec<BnStatsRow>> {
    let blocks = match &model.body {
        Body::Training(blocks) => blocks,
        Body::Plain(_) => return Err(Error::NoBnLayers),
    };
    let mut rows = Vec::with_capacity(model.bn_layers().len());
    let mut feat = prelu(&conv2d(x, &model.head)?, &model.acts[0])?;
    for (i, block) in blocks.iter().enumerate() {
        let out = trace_block(&feat, block, &model.spec.block, &mut rows)?;
        feat = prelu(&out, &model.acts[i + 1])?;
    }
    debug_assert_eq!(rows.len(), model.bn_layers().len());
    Ok(rows)
}

/// Copy `patch` into `base` with its top-left corner at `top_left = (y, x)`.
/// Pixels outside the rectangle are untouched. A zero-area patch returns
/// `base` unchanged.
pub fn paste_patch<T: Scalar>(
    base: &Tensor4<T>,
    patch: &Tensor4<T>,
    top_left: (usize, usize),
) -> Result<Tensor4<T>> {
    let [n, c, h, w] = base.dims();
    let [pn, pc, ph, pw] = patch.dims();
    if pn != n || pc != c {
        return Err(Error::ShapeMismatch {
            op: "paste_patch",
            expected: [n, c, ph, pw],
            got: patch.dims(),
        });
    }
    let (ty, tx) = top_left;
    if ty + ph > h || tx + pw > w {
        return Err(Error::OutOfBounds {
            op: "paste_patch",
            msg: format!("{ph}x{pw} patch at ({ty}, {tx}) exceeds {h}x{w} base"),
        });
    }
    let mut out = base.clone();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..ph {
                let src = patch.index(i, ch, y, 0);
                let dst = out.index(i, ch, ty + y, tx);
                let row = patch.data()[src..src + pw].to_vec();
                out.data_mut()[dst..dst + pw].copy_from_slice(&row);
            }
        }
    }
    Ok(out)
}

/// Everything the paste probe produces.
#[derive(Debug, Clone)]
pub struct PasteOutcome<T> {
    /// Model output on the untouched base image.
    pub base_sr: Tensor4<T>,
    /// Model output on the composite (base with patch pasted in).
    pub pasted_sr: Tensor4<T>,
    /// Per-pixel absolute difference `|pasted_sr - base_sr|`, same
    /// dimensions as the outputs.
    pub diff: Tensor4<T>,
}

/// Receptive-field radius of the feature path in input pixels: one pixel
/// per 3x3 convolution — the head, one per block, and the tail — so
/// `blocks + 2`. The 1x1 squeeze convolutions and the pointwise
/// activations add nothing.
pub fn receptive_field_radius(spec: &ModelSpec) -> usize {
    spec.blocks + 2
}

/// The output-coordinate rectangle (half-open `(y0, y1, x0, x1)`) that a
/// pasted rectangle can influence: the patch rectangle dilated by the
/// receptive-field radius in input coordinates, then scaled. Outside this
/// rectangle a convolution-only path must produce bit-identical output
/// with and without the paste.
pub fn dilated_paste_support(
    top_left: (usize, usize),
    patch_hw: (usize, usize),
    rf_radius: usize,
    scale: usize,
    out_hw: (usize, usize),
) -> (usize, usize, usize, usize) {
    let (ty, tx) = top_left;
    let (ph, pw) = patch_hw;
    let (oh, ow) = out_hw;
    let y0 = scale * ty.saturating_sub(rf_radius);
    let y1 = (scale * (ty + ph + rf_radius)).min(oh);
    let x0 = scale * tx.saturating_sub(rf_radius);
    let x1 = (scale * (tx + pw + rf_radius)).min(ow);
    (y0, y1, x0, x1)
}

/// Run the paste probe: super-resolve the base and the composite, and map
/// where the outputs differ.
///
/// With all batch norms latched the model is a fixed function, so any
/// difference is attributable to the paste; the support of `diff` is then
/// contained in [`dilated_paste_support`]. A model whose statistics
/// mismatch the pasted content shows large differences inside that
/// region — the artifact the instrument exists to expose.
pub fn paste_experiment<T: Scalar>(
    model: &Model<T>,
    base: &Tensor4<T>,
    patch: &Tensor4<T>,
    top_left: (usize, usize),
) -> Result<PasteOutcome<T>> {
    let pasted = paste_patch(base, patch, top_left)?;
    let base_sr = model.forward(base)?;
    let pasted_sr = model.forward(&pasted)?;
    let mut diff = pasted_sr.clone();
    for (d, b) in diff.data_mut().iter_mut().zip(base_sr.data()) {
        *d = (*d - *b).abs();
    }
    Ok(PasteOutcome {
        base_sr,
        pasted_sr,
        diff,
    })
}
