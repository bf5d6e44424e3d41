//! Training: configuration, the iteration loop, and the late freeze of
//! batch-norm statistics.
//!
//! The recipe is deliberately plain — L1 loss on random aligned patch
//! pairs, Adam, a decaying learning rate — with one twist: at a fixed
//! fraction from the end of the run, every batch-norm layer switches from
//! batch statistics to its accumulated running statistics and stays there
//! ([`freeze_bn`]). From that point training sees exactly the arithmetic
//! deployment will see, the affine pairs keep adapting to it, and the
//! final network is collapsible with no train/test drift.

pub mod adam;
pub mod bicubic;
pub mod dataset;
pub mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use bicubic::{bicubic_downscale, bicubic_resize};
pub use dataset::{load_png, sample_patch_batch, save_png, Dataset};
pub use schedule::{lr_at, Schedule};

use std::io::Write;

use crate::diagnostics::y_psnr;
use crate::error::{Error, Result};
use crate::model::{Model, ModelForm};
use crate::ops::batchnorm::BnMode;
use crate::ops::loss::{l1_loss, l1_loss_backward};
use crate::tensor::{Prng, Scalar, Tensor4};

/// Everything a training run needs besides the model and the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total optimizer iterations.
    pub total_iters: usize,
    /// Patch pairs per iteration.
    pub batch_size: usize,
    /// Low-resolution patch side; the high-resolution side is this times
    /// the model's scale.
    pub patch_size: usize,
    /// Base learning rate.
    pub lr0: f64,
    /// Learning-rate schedule.
    pub schedule: Schedule,
    /// Fraction of the run, counted from the end, trained with frozen
    /// statistics. `0.1` freezes at 90% of the run.
    pub freeze_fraction: f64,
    /// Seed for patch sampling (initialization has its own seed at model
    /// build time).
    pub seed: u64,
    /// Optimizer constants.
    pub adam: AdamConfig,
    /// Emit a log row every this many iterations (at iterations 0, k, 2k, ...),
    /// so a run of `total_iters` produces exactly `total_iters.div_ceil(log_every)`
    /// rows.
    pub log_every: usize,
}

impl TrainConfig {
    /// Defaults for a run of the given length: batch 32 of 48-pixel
    /// patches, Adam from 4e-4 halving at 50% and 75%, statistics frozen
    /// for the last tenth.
    pub fn new(total_iters: usize) -> Self {
        TrainConfig {
            total_iters,
            batch_size: 32,
            patch_size: 48,
            lr0: 4e-4,
            schedule: Schedule::MultiStep {
                milestones: vec![total_iters / 2, total_iters * 3 / 4],
                gamma: 0.5,
            },
            freeze_fraction: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
            log_every: 100,
        }
    }

    /// Check every constraint.
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::InvalidConfig {
                msg: "total_iters must be >= 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig {
                msg: "batch_size must be >= 1".into(),
            });
        }
        if self.patch_size < 4 {
            return Err(Error::InvalidConfig {
                msg: format!("patch_size {} is too small (need >= 4)", self.patch_size),
            });
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig {
                msg: format!("lr0 {} must be positive and finite", self.lr0),
            });
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(Error::InvalidConfig {
                msg: format!("freeze_fraction {} must be in [0, 1]", self.freeze_fraction),
            });
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig {
                msg: "log_every must be >= 1".into(),
            });
        }
        self.schedule.validate(self.total_iters)
    }

    /// Iteration at which statistics freeze:
    /// `round((1 - freeze_fraction) * total_iters)`. Equal to
    /// `total_iters` when the fraction is zero, meaning the freeze never
    /// fires during the run.
    pub fn freeze_iter(&self) -> usize {
        ((1.0 - self.freeze_fraction) * self.total_iters as f64).round() as usize
    }
}

/// What [`freeze_bn`] found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeOutcome {
    /// At least one layer was switched from `Batch` to `Frozen`.
    Froze,
    /// Every layer was already latched (or the model has none).
    AlreadyFrozen,
}

/// Latch every batch-norm layer: `Batch` becomes `Frozen`; layers already
/// `Frozen` or `Inference` are left alone. Idempotent.
pub fn freeze_bn<T: Scalar>(model: &mut Model<T>) -> FreezeOutcome {
    let mut any = false;
    for bn in model.bn_layers_mut() {
        if bn.mode == BnMode::Batch {
            bn.mode = BnMode::Frozen;
            any = true;
        }
    }
    if any {
        FreezeOutcome::Froze
    } else {
        FreezeOutcome::AlreadyFrozen
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr_val: f64,
}

impl LogRow {
    /// CSV encoding, matching the `iter,lr,loss,psnr_val` header.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.4}",
            self.iter, self.lr, self.loss, self.psnr_val
        )
    }
}

/// Everything a finished run reports.
pub struct TrainOutcome {
    /// The logged rows, one per log point.
    pub rows: Vec<LogRow>,
    /// Per-iteration training loss, every iteration.
    pub losses: Vec<f64>,
    /// The iteration the freeze was scheduled for.
    pub freeze_iter: usize,
    /// Iteration at which statistics actually froze, if the run reached it.
    pub froze_at: Option<usize>,
}

/// Train `model` in place.
///
/// Runs `cfg.total_iters` iterations of: sample an aligned patch batch
/// from `train`, forward in training mode, L1 loss against the
/// high-resolution patches, backward, one Adam step at the scheduled rate.
/// At `cfg.freeze_iter()` the batch-norm statistics latch via
/// [`freeze_bn`]. Validation PSNR (luma, border-cropped by the scale) is
/// measured on `val` with deployment-mode forwards at every log point.
///
/// When `sink` is given, log rows stream to it as CSV — `#`-prefixed
/// lines echo the effective configuration, then the column header, then
/// one row per log point, flushed as written so a watcher sees progress.
///
/// Fully deterministic: the same model, data, and config (including
/// `cfg.seed`) reproduce the same parameters and the same log bytes.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.form() != ModelForm::Training {
        return Err(Error::ModelStructure {
            op: "train_loop",
            msg: "only the multi-branch form can be trained".into(),
        });
    }
    let scale = model.spec.scale;
    if train.colors() != model.spec.colors || val.colors() != model.spec.colors {
        return Err(Error::ChannelMismatch {
            op: "train_loop",
            tensor: train.colors(),
            params: model.spec.colors,
        });
    }

    // Pre-build validation pairs: crop each image to a multiple of the
    // scale, downscale once.
    let val_pairs: Vec<(Tensor4<T>, Tensor4<T>)> = val
        .images()
        .iter()
        .map(|img| {
            let [_, c, h, w] = img.dims();
            let (ch_, cw) = ((h / scale) * scale, (w / scale) * scale);
            if ch_ == 0 || cw == 0 {
                return Err(Error::ImageTooSmall {
                    op: "train_loop",
                    msg: format!("validation image {h}x{w} smaller than scale {scale}"),
                });
            }
            let mut crop = Tensor4::zeros([1, c, ch_, cw]);
            for cc in 0..c {
                for y in 0..ch_ {
                    let src = img.index(0, cc, y, 0);
                    let dst = crop.index(0, cc, y, 0);
                    let row = img.data()[src..src + cw].to_vec();
                    crop.data_mut()[dst..dst + cw].copy_from_slice(&row);
                }
            }
            let lr_img = bicubic_downscale(&crop, scale)?;
            Ok((lr_img, crop))
        })
        .collect::<Result<Vec<_>>>()?;

    let freeze_iter = cfg.freeze_iter();
    if let Some(s) = sink.as_deref_mut() {
        writeln!(s, "# total_iters={}", cfg.total_iters)?;
        writeln!(s, "# batch_size={}", cfg.batch_size)?;
        writeln!(s, "# patch_size={}", cfg.patch_size)?;
        writeln!(s, "# lr0={:e}", cfg.lr0)?;
        writeln!(s, "# schedule={:?}", cfg.schedule)?;
        writeln!(s, "# freeze_fraction={}", cfg.freeze_fraction)?;
        writeln!(s, "# freeze_iter={freeze_iter}")?;
        writeln!(s, "# seed={}", cfg.seed)?;
        writeln!(
            s,
            "# adam_beta1={} adam_beta2={} adam_eps={:e}",
            cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps
        )?;
        writeln!(s, "# model={} colors={}", model.spec.notation(), model.spec.colors)?;
        writeln!(s, "iter,lr,loss,psnr_val")?;
        s.flush()?;
    }

    let mut rng = Prng::new(cfg.seed);
    let slice_lens: Vec<usize> = model.param_slices_mut().iter().map(|s| s.len()).collect();
    let mut opt = AdamState::<T>::new(&slice_lens, cfg.adam);

    let mut rows = Vec::new();
    let mut losses = Vec::with_capacity(cfg.total_iters);
    let mut froze_at = None;
    for iter in 0..cfg.total_iters {
        if iter == freeze_iter && freeze_bn(model) == FreezeOutcome::Froze {
            froze_at = Some(iter);
        }
        let lr = lr_at(&cfg.schedule, cfg.lr0, iter, cfg.total_iters)?;
        let (lo, hi) = sample_patch_batch(train, cfg.batch_size, cfg.patch_size, scale, &mut rng)?;
        let (pred, tape) = model.forward_train(&lo)?;
        let loss = l1_loss(&pred, &hi)?.to_f64();
        let grad = l1_loss_backward(&pred, &hi)?;
        let grads = model.backward(&grad, tape)?;
        {
            let grad_slices = grads.grad_slices();
            let mut param_slices = model.param_slices_mut();
            opt.step(&mut param_slices, &grad_slices, lr)?;
        }
        losses.push(loss);

        if iter % cfg.log_every == 0 {
            let mut acc = 0.0;
            for (lo_img, hi_img) in &val_pairs {
                let sr = model.forward(lo_img)?;
                acc += y_psnr(&sr, hi_img, scale)?;
            }
            let row = LogRow {
                iter,
                lr,
                loss,
                psnr_val: acc / val_pairs.len() as f64,
            };
            if let Some(s) = sink.as_deref_mut() {
                writeln!(s, "{}", row.to_csv())?;
                s.flush()?;
            }
            rows.push(row);
        }
    }

    Ok(TrainOutcome {
        rows,
        losses,
        freeze_iter,
        froze_at,
    })
}
