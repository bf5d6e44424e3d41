//! One module per subcommand. Each exposes an `Args` struct for clap and a
//! `run(&Args) -> Result<i32>` returning the process exit code.

pub mod count;
pub mod diagnose;
pub mod infer;
pub mod merge;
pub mod train;
pub mod verify;

use repsr::block::{BlockSpec, BnPlacement, ResidualKind};
use repsr::model::ModelSpec;
use repsr::{Error, Result};

/// Invalid-usage error carrying the offending subcommand.
pub fn arg_err(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

/// Clap value parser for [`ResidualKind`] (`clean`, `with-bn`, `none`).
pub fn parse_residual(s: &str) -> std::result::Result<ResidualKind, String> {
    s.parse()
}

/// Clap value parser for [`BnPlacement`] (`mid`, `after-each`).
pub fn parse_bn_placement(s: &str) -> std::result::Result<BnPlacement, String> {
    s.parse()
}

/// Assemble and validate a full model spec from the size notation plus the
/// block-shape knobs shared by `train` and `count`.
pub fn build_spec(
    notation: &str,
    colors: usize,
    branches: usize,
    width_multiplier: usize,
    residual: ResidualKind,
    bn_placement: BnPlacement,
) -> Result<ModelSpec> {
    let (blocks, channels, scale) = ModelSpec::parse_notation(notation)?;
    let spec = ModelSpec {
        blocks,
        channels,
        scale,
        colors,
        block: BlockSpec {
            channels,
            width_multiplier,
            num_branches: branches,
            residual,
            bn_placement,
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// Parse `"Y,X"` or `"WxH"`-style pairs of unsigned integers.
pub fn parse_pair(s: &str, sep: char, what: &'static str) -> Result<(usize, usize)> {
    let bad = || arg_err(what, format!("expected <int>{sep}<int>, got `{s}`"));
    let (a, b) = s.split_once(sep).ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    Ok((a, b))
}
