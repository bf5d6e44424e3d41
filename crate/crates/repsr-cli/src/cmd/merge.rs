//! `repsr merge`: collapse training-form weights into plain-form weights.
//!
//! Refuses models whose batch norms are still in `Batch` mode: their
//! forward pass depends on batch statistics, so no single plain convolution
//! reproduces it. Freeze (or recalibrate) first.

use clap::Args;
use repsr::model::{Model, ModelForm};
use repsr::ops::batchnorm::BnMode;
use repsr::reparam::collapse_model;
use repsr::weights::{
    load_any, load_header, save_model, save_model_with_provenance, AnyModel, TrainProvenance,
};
use repsr::{Error, Result, Scalar};
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct MergeArgs {
    /// Training-form weight file to collapse.
    #[arg(long)]
    model: PathBuf,
    /// Where to write the plain-form weights.
    #[arg(long)]
    out: PathBuf,
}

fn go<T: Scalar>(m: &Model<T>, provenance: Option<TrainProvenance>, out: &Path) -> Result<i32> {
    if m.form() == ModelForm::Plain {
        return Err(Error::ModelStructure {
            op: "merge",
            msg: "weights are already in plain form".into(),
        });
    }
    if m.bn_layers().iter().any(|bn| bn.mode == BnMode::Batch) {
        return Err(Error::BnMode {
            op: "merge",
            msg: "batch statistics are still live; freeze them (train to completion \
                  or recalibrate) before collapsing"
                .into(),
        });
    }
    let plain = collapse_model(m)?;
    match provenance {
        Some(p) => save_model_with_provenance(&plain, p, out)?,
        None => save_model(&plain, out)?,
    }
    println!(
        "collapsed {} to plain form: {}",
        plain.spec.notation(),
        out.display()
    );
    Ok(0)
}

pub fn run(args: &MergeArgs) -> Result<i32> {
    let provenance = load_header(&args.model)?.provenance;
    match load_any(&args.model)? {
        AnyModel::F32(m) => go(&m, provenance, &args.out),
        AnyModel::F64(m) => go(&m, provenance, &args.out),
    }
}
