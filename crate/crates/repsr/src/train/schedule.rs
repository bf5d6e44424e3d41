//! Learning-rate schedules: step decay at milestones, or cosine decay
//! with warm restarts.

use crate::error::{Error, Result};

/// How the learning rate evolves over a run of `total_iters` iterations.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Multiply the rate by `gamma` at each milestone iteration.
    MultiStep {
        /// Strictly increasing iteration indices.
        milestones: Vec<usize>,
        /// Decay factor applied at each milestone, in `(0, 1]`.
        gamma: f64,
    },
    /// Split the run into equal cycles; within each, decay from the base
    /// rate to `lr_min` along a half cosine, snapping back at the start of
    /// the next cycle.
    CosineRestarts {
        /// Number of cycles, >= 1.
        cycles: usize,
        /// Floor the rate decays toward (commonly 0).
        lr_min: f64,
    },
}

impl Schedule {
    /// Validate against a run length.
    pub fn validate(&self, total_iters: usize) -> Result<()> {
        if total_iters == 0 {
            return Err(Error::InvalidConfig {
                msg: "total_iters must be >= 1".into(),
            });
        }
        match self {
            Schedule::MultiStep { milestones, gamma } => {
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err(Error::InvalidConfig {
                        msg: format!("multistep gamma {gamma} must be in (0, 1]"),
                    });
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidConfig {
                        msg: "milestones must be strictly increasing".into(),
                    });
                }
            }
            Schedule::CosineRestarts { cycles, lr_min } => {
                if *cycles == 0 {
                    return Err(Error::InvalidConfig {
                        msg: "cosine schedule needs at least one cycle".into(),
                    });
                }
                if !(*lr_min >= 0.0 && lr_min.is_finite()) {
                    return Err(Error::InvalidConfig {
                        msg: format!("lr_min {lr_min} must be finite and >= 0"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at iteration `iter` of a `total_iters`-long run starting
/// from `lr0`.
pub fn lr_at(schedule: &Schedule, lr0: f64, iter: usize, total_iters: usize) -> Result<f64> {
    schedule.validate(total_iters)?;
    if iter >= total_iters {
        return Err(Error::invalid(
            "lr_at",
            format!("iter {iter} outside run of {total_iters}"),
        ));
    }
    Ok(match schedule {
        Schedule::MultiStep { milestones, gamma } => {
            let hits = milestones.iter().filter(|&&m| m <= iter).count();
            lr0 * gamma.powi(hits as i32)
        }
        Schedule::CosineRestarts { cycles, lr_min } => {
            // Equal cycles, rounding the length up so every iteration
            // belongs to one.
            let cycle_len = total_iters.div_ceil(*cycles);
            let t = (iter % cycle_len) as f64 / cycle_len as f64;
            lr_min + (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
        }
    })
}
