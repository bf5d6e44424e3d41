//! `repsr verify`: collapse a training-form model in memory and check that
//! both forms produce the same outputs on random inputs.
//!
//! Prints one line — `PASS max_abs_diff=<x>` or `FAIL max_abs_diff=<x>
//! tolerance=<t>` — and exits 0 on pass, 1 on fail.

use clap::Args;
use repsr::model::Model;
use repsr::reparam::{collapse_model, verify_equivalence};
use repsr::weights::{load_any, AnyModel};
use repsr::{Prng, Result, Scalar};
use std::path::PathBuf;

#[derive(Args)]
pub struct VerifyArgs {
    /// Training-form weight file to check.
    #[arg(long)]
    model: PathBuf,
    /// Random inputs to feed both forms.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Largest allowed |difference| [default: 1e-5 for f32, 1e-10 for f64].
    #[arg(long)]
    tolerance: Option<f64>,
    /// Seed for the probe inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn go<T: Scalar>(m: &Model<T>, args: &VerifyArgs) -> Result<i32> {
    let plain = collapse_model(m)?;
    let mut rng = Prng::new(args.seed);
    let report = verify_equivalence(m, &plain, args.trials, args.tolerance, &mut rng)?;
    if report.pass {
        println!("PASS max_abs_diff={:e}", report.max_abs_diff);
        Ok(0)
    } else {
        println!(
            "FAIL max_abs_diff={:e} tolerance={:e}",
            report.max_abs_diff, report.tolerance
        );
        Ok(1)
    }
}

pub fn run(args: &VerifyArgs) -> Result<i32> {
    match load_any(&args.model)? {
        AnyModel::F32(m) => go(&m, args),
        AnyModel::F64(m) => go(&m, args),
    }
}
