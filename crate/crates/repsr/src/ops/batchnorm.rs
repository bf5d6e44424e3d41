//! Per-channel batch normalization with three statistics modes.
//!
//! The mode is the whole story of this layer:
//!
//! - **Batch**: normalize with the biased mean/variance of the current
//!   batch over `(n, h, w)`, then fold those statistics into the running
//!   estimates with momentum. This is ordinary training behavior.
//! - **Frozen**: normalize with the *stored* running statistics and never
//!   touch them again; the affine pair `(gamma, beta)` keeps receiving
//!   gradients. This is the late-training state that makes every branch an
//!   affine function of its input, which is what the collapse step needs.
//! - **Inference**: arithmetic identical to Frozen — the same code path,
//!   so outputs are bit-equal — but the affine pair no longer reports
//!   gradients.
//!
//! Statistics are accumulated in `f64` regardless of the tensor's scalar
//! type and rounded once at the end, so `f32` batch statistics do not decay
//! with batch size.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Which statistics the layer normalizes with (see module docs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BnMode {
    /// Batch statistics; running estimates are updated.
    Batch,
    /// Stored statistics, latched; `gamma`/`beta` still trainable.
    Frozen,
    /// Stored statistics, latched; nothing trainable.
    Inference,
}

impl std::fmt::Display for BnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BnMode::Batch => "batch",
            BnMode::Frozen => "frozen",
            BnMode::Inference => "inference",
        };
        f.write_str(s)
    }
}

/// State of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    /// Per-channel scale, trainable.
    pub gamma: Vec<T>,
    /// Per-channel shift, trainable.
    pub beta: Vec<T>,
    /// Running mean estimate (population statistic).
    pub run_mean: Vec<T>,
    /// Running variance estimate (population statistic, biased).
    pub run_var: Vec<T>,
    /// Variance floor inside the square root.
    pub eps: T,
    /// EMA weight of the newest batch: `run = (1-m)*run + m*batch`.
    pub momentum: T,
    /// Statistics mode.
    pub mode: BnMode,
}

/// Default variance floor.
pub const BN_EPS: f64 = 1e-5;
/// Default EMA momentum.
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BnParams<T> {
    /// Fresh layer: identity affine, zero mean / unit variance estimates,
    /// default `eps` and momentum, `Batch` mode.
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            run_mean: vec![T::zero(); channels],
            run_var: vec![T::one(); channels],
            eps: T::from_f64(BN_EPS),
            momentum: T::from_f64(BN_MOMENTUM),
            mode: BnMode::Batch,
        }
    }

    /// Channel count.
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Trainable scalar count (`gamma` and `beta`).
    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }

    fn check_channels(&self, op: &'static str, x: &Tensor4<T>) -> Result<()> {
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

/// Per-channel biased mean and variance over `(n, h, w)`, accumulated in
/// `f64`.
pub(crate) fn batch_stats<T: Scalar>(x: &Tensor4<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let s = x.index(i, ch, 0, 0);
            let mut acc = 0.0;
            for &v in &x.data()[s..s + hw] {
                acc += v.to_f64();
            }
            mean[ch] += acc;
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for i in 0..n {
        for ch in 0..c {
            let s = x.index(i, ch, 0, 0);
            let m = mean[ch];
            let mut acc = 0.0;
            for &v in &x.data()[s..s + hw] {
                let d = v.to_f64() - m;
                acc += d * d;
            }
            var[ch] += acc;
        }
    }
    for v in &mut var {
        *v /= count;
    }
    (mean, var)
}

/// Normalize with the given per-channel statistics and apply the affine
/// pair. Also returns the normalized (pre-affine) tensor and the inverse
/// standard deviations, which the backward pass needs.
fn normalize<T: Scalar>(
    x: &Tensor4<T>,
    mean: &[T],
    var: &[T],
    p: &BnParams<T>,
) -> (Tensor4<T>, Tensor4<T>, Vec<T>) {
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(x.dims());
    let mut out = Tensor4::zeros(x.dims());
    for i in 0..n {
        for ch in 0..c {
            let s = x.index(i, ch, 0, 0);
            let (m, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (p.gamma[ch], p.beta[ch]);
            let src = &x.data()[s..s + hw];
            for k in 0..hw {
                let nh = (src[k] - m) * is;
                xhat.data_mut()[s + k] = nh;
                out.data_mut()[s + k] = nh * g + b;
            }
        }
    }
    (out, xhat, inv_std)
}

/// Saved forward state needed by [`batchnorm_backward`]. Consumed by the
/// backward call so it cannot be reused against a different forward.
#[derive(Debug)]
pub struct BnTape<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    mode: BnMode,
}

/// Forward pass. In `Batch` mode this updates the running statistics,
/// hence the `&mut` — `Frozen` and `Inference` leave the layer untouched.
pub fn batchnorm_forward<T: Scalar>(x: &Tensor4<T>, p: &mut BnParams<T>) -> Result<Tensor4<T>> {
    batchnorm_forward_with_tape(x, p).map(|(out, _)| out)
}

/// Forward pass that also records what the backward pass will need.
pub fn batchnorm_forward_with_tape<T: Scalar>(
    x: &Tensor4<T>,
    p: &mut BnParams<T>,
) -> Result<(Tensor4<T>, BnTape<T>)> {
    p.check_channels("batchnorm_forward", x)?;
    let (out, xhat, inv_std) = match p.mode {
        BnMode::Batch => {
            let count = x.n() * x.h() * x.w();
            if count < 2 {
                return Err(Error::DegenerateBatch { count });
            }
            let (mean64, var64) = batch_stats(x);
            let mean: Vec<T> = mean64.iter().map(|&v| T::from_f64(v)).collect();
            let var: Vec<T> = var64.iter().map(|&v| T::from_f64(v)).collect();
            let keep = T::one() - p.momentum;
            for ch in 0..p.channels() {
                p.run_mean[ch] = keep * p.run_mean[ch] + p.momentum * mean[ch];
                p.run_var[ch] = keep * p.run_var[ch] + p.momentum * var[ch];
            }
            normalize(x, &mean, &var, p)
        }
        // One shared arm for both latched modes: this is what makes a
        // frozen training-time forward bit-equal to deployment.
        BnMode::Frozen | BnMode::Inference => normalize(x, &p.run_mean, &p.run_var, p),
    };
    out.debug_assert_finite("batchnorm_forward");
    Ok((
        out,
        BnTape {
            xhat,
            inv_std,
            mode: p.mode,
        },
    ))
}

/// Inference-semantics forward: stored statistics, no mutation, whatever
/// the layer's mode. This is the path deployment and validation use.
pub fn batchnorm_infer<T: Scalar>(x: &Tensor4<T>, p: &BnParams<T>) -> Result<Tensor4<T>> {
    p.check_channels("batchnorm_infer", x)?;
    let (out, _, _) = normalize(x, &p.run_mean, &p.run_var, p);
    out.debug_assert_finite("batchnorm_infer");
    Ok(out)
}

/// Gradients produced by [`batchnorm_backward`]. The affine gradients are
/// `None` exactly when the forward ran in `Inference` mode.
pub struct BnGrads<T> {
    /// Gradient with respect to the forward input.
    pub input: Tensor4<T>,
    /// Gradient for `gamma`, absent in `Inference` mode.
    pub gamma: Option<Vec<T>>,
    /// Gradient for `beta`, absent in `Inference` mode.
    pub beta: Option<Vec<T>>,
}

/// Reverse-mode gradients of [`batchnorm_forward`].
///
/// In `Batch` mode the batch statistics depend on the input, so the input
/// gradient carries the two correction terms from differentiating through
/// the mean and variance:
/// `dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))`,
/// means taken per channel over `(n, h, w)`. In the latched modes the
/// statistics are constants and the layer is a per-channel affine map, so
/// `dx = dy * gamma * inv_std`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    tape: BnTape<T>,
    p: &BnParams<T>,
) -> Result<BnGrads<T>> {
    p.check_channels("batchnorm_backward", grad_out)?;
    if grad_out.dims() != tape.xhat.dims() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm_backward",
            expected: tape.xhat.dims(),
            got: grad_out.dims(),
        });
    }
    let [n, c, h, w] = grad_out.dims();
    let hw = h * w;
    let count = T::from_f64((n * hw) as f64);

    // Per-channel sums: sum(dy) and sum(dy * xhat). These are d(beta) and
    // d(gamma) and also feed the Batch-mode input gradient.
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let s = grad_out.index(i, ch, 0, 0);
            let g = &grad_out.data()[s..s + hw];
            let xh = &tape.xhat.data()[s..s + hw];
            let mut a = T::zero();
            let mut b = T::zero();
            for k in 0..hw {
                a = a + g[k];
                b = b + g[k] * xh[k];
            }
            sum_dy[ch] = sum_dy[ch] + a;
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + b;
        }
    }

    let mut ginput = Tensor4::zeros(grad_out.dims());
    match tape.mode {
        BnMode::Batch => {
            for i in 0..n {
                for ch in 0..c {
                    let s = grad_out.index(i, ch, 0, 0);
                    let scale = p.gamma[ch] * tape.inv_std[ch];
                    let mean_dy = sum_dy[ch] / count;
                    let mean_dy_xhat = sum_dy_xhat[ch] / count;
                    for k in 0..hw {
                        let dy = grad_out.data()[s + k];
                        let xh = tape.xhat.data()[s + k];
                        ginput.data_mut()[s + k] = scale * (dy - mean_dy - xh * mean_dy_xhat);
                    }
                }
            }
        }
        BnMode::Frozen | BnMode::Inference => {
            for i in 0..n {
                for ch in 0..c {
                    let s = grad_out.index(i, ch, 0, 0);
                    let scale = p.gamma[ch] * tape.inv_std[ch];
                    for k in 0..hw {
                        ginput.data_mut()[s + k] = grad_out.data()[s + k] * scale;
                    }
                }
            }
        }
    }

    let (ggamma, gbeta) = match tape.mode {
        BnMode::Inference => (None, None),
        BnMode::Batch | BnMode::Frozen => (Some(sum_dy_xhat), Some(sum_dy)),
    };
    Ok(BnGrads {
        input: ginput,
        gamma: ggamma,
        beta: gbeta,
    })
}
