//! `repsr count`: parameter and multiply-accumulate accounting for both
//! forms of a spec, without building any weights.

use crate::cmd::{build_spec, parse_bn_placement, parse_pair, parse_residual};
use clap::Args;
use repsr::block::{BnPlacement, ResidualKind};
use repsr::model::{count_params_flops, ModelForm};
use repsr::Result;

#[derive(Args)]
pub struct CountArgs {
    /// Size notation M<blocks>C<channels>x<scale>.
    #[arg(long)]
    spec: String,
    /// Image channels: 1 or 3.
    #[arg(long, default_value_t = 1)]
    colors: usize,
    /// Expand-squeeze branches per block.
    #[arg(long, default_value_t = 2)]
    branches: usize,
    /// Branch interior width multiplier.
    #[arg(long, default_value_t = 2)]
    width_multiplier: usize,
    /// Shortcut flavor: clean, with-bn, or none.
    #[arg(long, value_parser = parse_residual, default_value = "clean")]
    residual: ResidualKind,
    /// Norm placement: mid or after-each.
    #[arg(long, value_parser = parse_bn_placement, default_value = "mid")]
    bn_placement: BnPlacement,
    /// Low-resolution input size as WxH for the MAC columns.
    #[arg(long, default_value = "320x180")]
    size: String,
}

pub fn run(args: &CountArgs) -> Result<i32> {
    let spec = build_spec(
        &args.spec,
        args.colors,
        args.branches,
        args.width_multiplier,
        args.residual,
        args.bn_placement,
    )?;
    let (w, h) = parse_pair(&args.size, 'x', "count --size")?;
    let training = count_params_flops(&spec, ModelForm::Training, h, w)?;
    let plain = count_params_flops(&spec, ModelForm::Plain, h, w)?;

    println!(
        "{} colors={} branches={} width-multiplier={} residual={:?} input={}x{}",
        spec.notation(),
        spec.colors,
        spec.block.num_branches,
        spec.block.width_multiplier,
        spec.block.residual,
        w,
        h
    );
    println!("{:<10} {:>12} {:>16} {:>10}", "form", "params", "macs", "gmacs");
    for (name, report) in [("training", training), ("plain", plain)] {
        println!(
            "{:<10} {:>12} {:>16} {:>10.3}",
            name,
            report.params,
            report.macs,
            report.gmacs()
        );
    }
    Ok(0)
}
