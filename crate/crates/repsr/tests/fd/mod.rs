//! Central finite-difference harness shared by the per-layer gradient tests
//! and the acceptance gate.
//!
//! Scheme: fix a random weighting `w`, define the scalar loss
//! `L(θ) = Σ w ⊙ f(θ)`, feed `w` to the backward pass as the upstream
//! gradient, and compare every analytic derivative against
//! `(L(θ+h) − L(θ−h)) / 2h`.
//!
//! Each sweep runs a configurable number of random instances and returns a
//! [`Sweep`] summary (worst relative error plus where it happened) instead
//! of asserting inline, so one caller can fail fast per layer while another
//! aggregates across all layers.
#![allow(dead_code)] // two test targets share this file; each uses a subset

use repsr::block::{
    block_backward, block_forward_with_tape, build_block, BlockSpec, BnPlacement, ResidualKind,
};
use repsr::ops::activation::{prelu, prelu_backward, prelu_with_tape, PreluParams};
use repsr::ops::batchnorm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_with_tape, BnMode, BnParams,
};
use repsr::ops::conv::{conv2d, conv2d_backward, conv2d_with_tape, ConvParams};
use repsr::ops::loss::{l1_loss, l1_loss_backward};
use repsr::ops::resample::{
    nearest_upsample, nearest_upsample_backward, pixel_shuffle, pixel_shuffle_backward,
};
use repsr::tensor::{seeded_uniform, Prng, Tensor4};

pub const INSTANCES: usize = 20;
pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Outcome of a finite-difference sweep: how much was checked and the worst
/// relative error seen, with enough context to locate it.
pub struct Sweep {
    pub instances: usize,
    pub coords: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl Sweep {
    fn new() -> Self {
        Sweep {
            instances: 0,
            coords: 0,
            max_rel: 0.0,
            worst: String::new(),
        }
    }

    pub fn merge(&mut self, other: &Sweep) {
        self.instances += other.instances;
        self.coords += other.coords;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
    }

    /// Panic if the worst relative error exceeds [`TOL`].
    pub fn assert_ok(&self) {
        assert!(
            self.max_rel <= TOL,
            "worst gradient mismatch {:e} > {TOL:e} at {}",
            self.max_rel,
            self.worst
        );
    }
}

/// Relative error with a floor: coordinates whose true magnitude is below
/// the floor are compared absolutely (finite differences cannot resolve a
/// meaningful *ratio* against a near-zero target).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare analytic gradients against central differences of the loss,
/// coordinate by coordinate. `perturbed` must return the loss with the
/// named coordinate of the checked tensor shifted by the given delta.
fn check_coords(
    sweep: &mut Sweep,
    what: &str,
    instance: usize,
    analytic: &[f64],
    mut perturbed: impl FnMut(usize, f64) -> f64,
) {
    // Cap the work per tensor; strided so every region is sampled.
    let stride = (analytic.len() / 48).max(1);
    for i in (0..analytic.len()).step_by(stride) {
        let numeric = (perturbed(i, EPS) - perturbed(i, -EPS)) / (2.0 * EPS);
        let err = rel_err(analytic[i], numeric);
        sweep.coords += 1;
        if err > sweep.max_rel {
            sweep.max_rel = err;
            sweep.worst = format!(
                "{what} instance {instance} coord {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
}

fn to_f64s(t: &Tensor4<f64>) -> Vec<f64> {
    t.data().to_vec()
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn conv_case(k: usize, instances: usize) -> Sweep {
    let mut sweep = Sweep::new();
    for inst in 0..instances {
        let mut rng = Prng::new(1000 + (k * 100 + inst) as u64);
        let (n, cin, cout) = (1 + rng.index(2), 1 + rng.index(3), 1 + rng.index(3));
        let (h, w) = (2 + rng.index(4), 2 + rng.index(4));
        let x = seeded_uniform::<f64>([n, cin, h, w], -1.0, 1.0, &mut rng).unwrap();
        let p = ConvParams::new(
            seeded_uniform([cout, cin, k, k], -1.0, 1.0, &mut rng).unwrap(),
            to_f64s(&seeded_uniform([1, 1, 1, cout], -0.5, 0.5, &mut rng).unwrap()),
        )
        .unwrap();
        let up = seeded_uniform::<f64>([n, cout, h, w], -1.0, 1.0, &mut rng).unwrap();

        let (_, tape) = conv2d_with_tape(&x, &p).unwrap();
        let grads = conv2d_backward(&up, tape, &p).unwrap();

        let name = format!("conv{k}x{k}");
        check_coords(
            &mut sweep,
            &format!("{name} input"),
            inst,
            grads.input.data(),
            |i, d| {
                let mut xx = x.clone();
                xx.data_mut()[i] += d;
                dot(&conv2d(&xx, &p).unwrap(), &up)
            },
        );
        check_coords(
            &mut sweep,
            &format!("{name} weight"),
            inst,
            grads.weight.data(),
            |i, d| {
                let mut pp = p.clone();
                pp.weight.data_mut()[i] += d;
                dot(&conv2d(&x, &pp).unwrap(), &up)
            },
        );
        check_coords(&mut sweep, &format!("{name} bias"), inst, &grads.bias, |i, d| {
            let mut pp = p.clone();
            pp.bias[i] += d;
            dot(&conv2d(&x, &pp).unwrap(), &up)
        });
        sweep.instances += 1;
    }
    sweep
}

pub fn batchnorm_case(mode: BnMode, instances: usize) -> Sweep {
    let mut sweep = Sweep::new();
    for inst in 0..instances {
        let mut rng = Prng::new(2000 + inst as u64);
        let c = 1 + rng.index(3);
        // Batch statistics need more than one sample per channel.
        let (n, h, w) = (2, 2 + rng.index(3), 2 + rng.index(3));
        let x = seeded_uniform::<f64>([n, c, h, w], -1.0, 1.0, &mut rng).unwrap();
        let mut p = BnParams::<f64>::new(c);
        p.mode = mode;
        for ch in 0..c {
            p.gamma[ch] = 0.5 + rng.uniform_f64();
            p.beta[ch] = rng.uniform_f64() - 0.5;
            p.run_mean[ch] = rng.uniform_f64() - 0.5;
            p.run_var[ch] = 0.5 + rng.uniform_f64();
        }
        let up = seeded_uniform::<f64>([n, c, h, w], -1.0, 1.0, &mut rng).unwrap();

        let (_, tape) = batchnorm_forward_with_tape(&x, &mut p.clone()).unwrap();
        let grads = batchnorm_backward(&up, tape, &p).unwrap();
        let loss = |xx: &Tensor4<f64>, pp: &BnParams<f64>| {
            dot(&batchnorm_forward(xx, &mut pp.clone()).unwrap(), &up)
        };

        let name = format!("batchnorm {mode:?}");
        check_coords(
            &mut sweep,
            &format!("{name} input"),
            inst,
            grads.input.data(),
            |i, d| {
                let mut xx = x.clone();
                xx.data_mut()[i] += d;
                loss(&xx, &p)
            },
        );
        check_coords(
            &mut sweep,
            &format!("{name} gamma"),
            inst,
            grads.gamma.as_ref().unwrap(),
            |i, d| {
                let mut pp = p.clone();
                pp.gamma[i] += d;
                loss(&x, &pp)
            },
        );
        check_coords(
            &mut sweep,
            &format!("{name} beta"),
            inst,
            grads.beta.as_ref().unwrap(),
            |i, d| {
                let mut pp = p.clone();
                pp.beta[i] += d;
                loss(&x, &pp)
            },
        );
        sweep.instances += 1;
    }
    sweep
}

pub fn prelu_case(instances: usize) -> Sweep {
    let mut sweep = Sweep::new();
    for inst in 0..instances {
        let mut rng = Prng::new(3000 + inst as u64);
        let (n, c) = (1 + rng.index(2), 1 + rng.index(3));
        let (h, w) = (2 + rng.index(4), 2 + rng.index(4));
        let x = seeded_uniform::<f64>([n, c, h, w], -1.0, 1.0, &mut rng).unwrap();
        let mut p = PreluParams::<f64>::new(c);
        for s in &mut p.slope {
            *s = rng.uniform_f64() * 0.5;
        }
        let up = seeded_uniform::<f64>([n, c, h, w], -1.0, 1.0, &mut rng).unwrap();

        let (_, tape) = prelu_with_tape(&x, &p).unwrap();
        let grads = prelu_backward(&up, tape, &p).unwrap();

        // PReLU's kink sits at 0; keep probes off it. Coordinates closer to
        // zero than the step cannot be centrally differenced.
        check_coords(&mut sweep, "prelu input", inst, grads.input.data(), |i, d| {
            if x.data()[i].abs() < 10.0 * EPS {
                // Substitute a linear stand-in so the quotient reproduces
                // the analytic value: the true point is not differentiable.
                return grads.input.data()[i] * d;
            }
            let mut xx = x.clone();
            xx.data_mut()[i] += d;
            dot(&prelu(&xx, &p).unwrap(), &up)
        });
        check_coords(&mut sweep, "prelu slope", inst, &grads.slope, |i, d| {
            let mut pp = p.clone();
            pp.slope[i] += d;
            dot(&prelu(&x, &pp).unwrap(), &up)
        });
        sweep.instances += 1;
    }
    sweep
}

pub fn pixel_shuffle_case(instances: usize) -> Sweep {
    let mut sweep = Sweep::new();
    for inst in 0..instances {
        let mut rng = Prng::new(4000 + inst as u64);
        let r = 2 + rng.index(2);
        let (n, c) = (1 + rng.index(2), 1 + rng.index(2));
        let (h, w) = (2 + rng.index(3), 2 + rng.index(3));
        let x = seeded_uniform::<f64>([n, c * r * r, h, w], -1.0, 1.0, &mut rng).unwrap();
        let up = seeded_uniform::<f64>([n, c, h * r, w * r], -1.0, 1.0, &mut rng).unwrap();

        let grad = pixel_shuffle_backward(&up, r).unwrap();
        check_coords(&mut sweep, "pixel_shuffle input", inst, grad.data(), |i, d| {
            let mut xx = x.clone();
            xx.data_mut()[i] += d;
            dot(&pixel_shuffle(&xx, r).unwrap(), &up)
        });
        sweep.instances += 1;
    }
    sweep
}

pub fn nearest_upsample_case(instances: usize) -> Sweep {
    let mut sweep = Sweep::new();
    for inst in 0..instances {
        let mut rng = Prng::new(5000 + inst as u64);
        let r = 2 + rng.index(3);
        let (n, c) = (1 + rng.index(2), 1 + rng.index(2));
        let (h, w) = (2 + rng.index(3), 2 + rng.index(3));
        let x = seeded_uniform::<f64>([n, c, h, w], -1.0, 1.0, &mut rng).unwrap();
        let up = seeded_uniform::<f64>([n, c, h * r, w * r], -1.0, 1.0, &mut rng).unwrap();

        let grad = nearest_upsample_backward(&up, r).unwrap();
        check_coords(&mut sweep, "nearest_upsample input", inst, grad.data(), |i, d| {
            let mut xx = x.clone();
            xx.data_mut()[i] += d;
            dot(&nearest_upsample(&xx, r).unwrap(), &up)
        });
        sweep.instances += 1;
    }
    sweep
}

pub fn l1_loss_case(instances: usize) -> Sweep {
    let mut sweep = Sweep::new();
    for inst in 0..instances {
        let mut rng = Prng::new(6000 + inst as u64);
        let (n, c) = (1 + rng.index(2), 1 + rng.index(3));
        let (h, w) = (2 + rng.index(4), 2 + rng.index(4));
        let target = seeded_uniform::<f64>([n, c, h, w], -1.0, 1.0, &mut rng).unwrap();
        // Keep |pred - target| well above the probe step: |x| has a kink at
        // zero, so central differences are only valid away from ties.
        let mut pred = target.clone();
        for v in pred.data_mut() {
            let sign = if rng.uniform_f64() < 0.5 { -1.0 } else { 1.0 };
            *v += sign * (0.05 + rng.uniform_f64());
        }

        let grad = l1_loss_backward(&pred, &target).unwrap();
        check_coords(&mut sweep, "l1_loss pred", inst, grad.data(), |i, d| {
            let mut pp = pred.clone();
            pp.data_mut()[i] += d;
            l1_loss(&pp, &target).unwrap()
        });
        sweep.instances += 1;
    }
    sweep
}

pub fn block_case(instances: usize) -> Sweep {
    let mut sweep = Sweep::new();
    let residuals = [ResidualKind::Clean, ResidualKind::WithBn, ResidualKind::None];
    let placements = [BnPlacement::MidOnly, BnPlacement::AfterEach];
    let modes = [BnMode::Batch, BnMode::Frozen];
    for inst in 0..instances {
        let mut rng = Prng::new(7000 + inst as u64);
        let spec = BlockSpec {
            channels: 1 + rng.index(3),
            width_multiplier: 1 + rng.index(2),
            num_branches: 1 + rng.index(3),
            residual: residuals[inst % residuals.len()],
            bn_placement: placements[inst % placements.len()],
        };
        let mode = modes[inst % modes.len()];
        let (n, h, w) = (2, 2 + rng.index(3), 2 + rng.index(3));
        let x = seeded_uniform::<f64>([n, spec.channels, h, w], -1.0, 1.0, &mut rng).unwrap();
        let mut params = build_block::<f64>(&spec, &mut rng).unwrap();
        for bn in params.bn_layers_mut() {
            bn.mode = mode;
            for ch in 0..bn.gamma.len() {
                bn.gamma[ch] = 0.5 + rng.uniform_f64();
                bn.beta[ch] = rng.uniform_f64() - 0.5;
                bn.run_mean[ch] = rng.uniform_f64() - 0.5;
                bn.run_var[ch] = 0.5 + rng.uniform_f64();
            }
        }
        let up = seeded_uniform::<f64>(x.dims(), -1.0, 1.0, &mut rng).unwrap();

        let (_, tape) = block_forward_with_tape(&x, &mut params.clone(), &spec).unwrap();
        let (grad_in, grads) = block_backward(&up, tape, &params, &spec).unwrap();
        let loss = |xx: &Tensor4<f64>, pp: &repsr::block::BlockParams<f64>| {
            let (y, _) = block_forward_with_tape(xx, &mut pp.clone(), &spec).unwrap();
            dot(&y, &up)
        };

        let tag = format!(
            "block b{} w{} {:?} {:?} {mode:?}",
            spec.num_branches, spec.width_multiplier, spec.residual, spec.bn_placement
        );
        check_coords(&mut sweep, &format!("{tag} input"), inst, grad_in.data(), |i, d| {
            let mut xx = x.clone();
            xx.data_mut()[i] += d;
            loss(&xx, &params)
        });

        let analytic: Vec<Vec<f64>> = grads.grad_slices().iter().map(|s| s.to_vec()).collect();
        for (si, slice) in analytic.iter().enumerate() {
            check_coords(
                &mut sweep,
                &format!("{tag} param slice {si}"),
                inst,
                slice,
                |i, d| {
                    let mut pp = params.clone();
                    pp.param_slices_mut()[si][i] += d;
                    loss(&x, &pp)
                },
            );
        }
        sweep.instances += 1;
    }
    sweep
}

/// Run every sweep at the given instance count and return them by name.
pub fn sweep_all(instances: usize) -> Vec<(&'static str, Sweep)> {
    vec![
        ("conv3x3", conv_case(3, instances)),
        ("conv1x1", conv_case(1, instances)),
        ("batchnorm(batch)", batchnorm_case(BnMode::Batch, instances)),
        ("batchnorm(frozen)", batchnorm_case(BnMode::Frozen, instances)),
        ("prelu", prelu_case(instances)),
        ("pixel_shuffle", pixel_shuffle_case(instances)),
        ("nearest_upsample", nearest_upsample_case(instances)),
        ("l1_loss", l1_loss_case(instances)),
        ("multi_branch_block", block_case(instances)),
    ]
}
