//! `repsr infer`: upscale one PNG with a trained model (either form).

use crate::cmd::arg_err;
use clap::Args;
use repsr::model::Model;
use repsr::train::{load_png, save_png};
use repsr::weights::{load_any, AnyModel};
use repsr::{Result, Scalar};
use std::path::PathBuf;

#[derive(Args)]
pub struct InferArgs {
    /// Weight file (training or plain form).
    #[arg(long)]
    model: PathBuf,
    /// Input PNG. Color PNGs are reduced to luma for 1-channel models.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Expected upscaling factor; fails if the model disagrees.
    #[arg(long)]
    scale: Option<usize>,
}

fn go<T: Scalar>(m: &Model<T>, args: &InferArgs) -> Result<i32> {
    if let Some(s) = args.scale {
        if s != m.spec.scale {
            return Err(arg_err(
                "infer",
                format!("--scale {s} but the model upscales by {}", m.spec.scale),
            ));
        }
    }
    let img = load_png::<T>(&args.input, m.spec.colors)?;
    let sr = m.forward(&img)?;
    save_png(&args.out, &sr)?;
    let [_, _, h, w] = sr.dims();
    println!("wrote {} ({}x{} pixels)", args.out.display(), w, h);
    Ok(0)
}

pub fn run(args: &InferArgs) -> Result<i32> {
    match load_any(&args.model)? {
        AnyModel::F32(m) => go(&m, args),
        AnyModel::F64(m) => go(&m, args),
    }
}
