//! `repsr diagnose`: instruments for looking inside a trained model.
//!
//! `stats` walks the network on one image and reports, per batch-norm
//! layer, how far the population statistics sit from the statistics of that
//! very input — the gap that makes live batch statistics unsafe to fold.
//!
//! `paste` pastes a patch into a base image and compares the outputs with
//! and without the edit: for a frozen (or plain) model the difference must
//! vanish outside the patch's receptive-field footprint, while a model with
//! live batch statistics leaks the edit everywhere.

use crate::cmd::{arg_err, parse_pair};
use clap::{Args, Subcommand};
use repsr::diagnostics::{
    bn_stats_trace, dilated_paste_support, paste_experiment, receptive_field_radius,
    BN_STATS_CSV_HEADER,
};
use repsr::model::Model;
use repsr::train::{load_png, save_png};
use repsr::weights::{load_any, AnyModel};
use repsr::{Result, Scalar, Tensor4};
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

#[derive(Subcommand)]
pub enum DiagnoseCmd {
    /// Per-layer gap between this image's statistics and the population
    /// statistics, as CSV.
    Stats(StatsArgs),
    /// Paste a patch into a base image and map how far the edit reaches in
    /// the output.
    Paste(PasteArgs),
}

#[derive(Args)]
pub struct StatsArgs {
    /// Training-form weight file.
    #[arg(long)]
    model: PathBuf,
    /// Probe image (PNG).
    #[arg(long)]
    image: PathBuf,
    /// CSV destination [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PasteArgs {
    /// Weight file (either form).
    #[arg(long)]
    model: PathBuf,
    /// Base image (PNG).
    #[arg(long)]
    base: PathBuf,
    /// Patch image (PNG), pasted over the base.
    #[arg(long)]
    patch: PathBuf,
    /// Paste position as `Y,X`: the patch's top-left corner in base pixels.
    #[arg(long)]
    at: String,
    /// Directory for base_sr.png, pasted_sr.png, diff.png, and stats.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

fn stats<T: Scalar>(m: &Model<T>, args: &StatsArgs) -> Result<i32> {
    let img = load_png::<T>(&args.image, m.spec.colors)?;
    let rows = bn_stats_trace(m, &img)?;
    let mut text = String::from(BN_STATS_CSV_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    match &args.out {
        Some(path) => {
            File::create(path)?.write_all(text.as_bytes())?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{text}"),
    }
    Ok(0)
}

/// Reduce a per-channel absolute-difference map to one grayscale image,
/// taking the largest channel difference per pixel and scaling so the
/// hottest pixel is white. An all-zero map stays black.
fn heatmap<T: Scalar>(diff: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [_, c, h, w] = diff.dims();
    let mut hot = vec![0.0f64; h * w];
    let mut peak = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            let base = diff.index(0, ch, y, 0);
            for x in 0..w {
                let v = diff.data()[base + x].to_f64();
                let cell = &mut hot[y * w + x];
                *cell = cell.max(v);
                peak = peak.max(v);
            }
        }
    }
    if peak > 0.0 {
        for v in &mut hot {
            *v /= peak;
        }
    }
    Tensor4::from_vec([1, 1, h, w], hot.into_iter().map(T::from_f64).collect())
}

fn paste<T: Scalar>(m: &Model<T>, args: &PasteArgs) -> Result<i32> {
    let base = load_png::<T>(&args.base, m.spec.colors)?;
    let patch = load_png::<T>(&args.patch, m.spec.colors)?;
    let (ty, tx) = parse_pair(&args.at, ',', "diagnose paste --at")?;

    let outcome = paste_experiment(m, &base, &patch, (ty, tx))?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| arg_err("diagnose paste", format!("--out-dir: {e}")))?;
    save_png(&args.out_dir.join("base_sr.png"), &outcome.base_sr)?;
    save_png(&args.out_dir.join("pasted_sr.png"), &outcome.pasted_sr)?;
    save_png(&args.out_dir.join("diff.png"), &heatmap(&outcome.diff)?)?;

    let diffs = outcome.diff.data();
    let max = diffs.iter().map(|&v| v.to_f64()).fold(0.0f64, f64::max);
    let mean = diffs.iter().map(|&v| v.to_f64()).sum::<f64>() / diffs.len() as f64;
    let [_, _, oh, ow] = outcome.base_sr.dims();
    let [_, _, ph, pw] = patch.dims();
    let rf = receptive_field_radius(&m.spec);
    let (y0, y1, x0, x1) =
        dilated_paste_support((ty, tx), (ph, pw), rf, m.spec.scale, (oh, ow));

    let mut csv = File::create(args.out_dir.join("stats.csv"))?;
    writeln!(
        csv,
        "max_abs_diff,mean_abs_diff,support_y0,support_y1,support_x0,support_x1"
    )?;
    writeln!(csv, "{max:.8e},{mean:.8e},{y0},{y1},{x0},{x1}")?;

    println!(
        "pasted {pw}x{ph} at ({ty},{tx}); output diff max={max:.3e} mean={mean:.3e}"
    );
    println!(
        "receptive-field support in the output: rows {y0}..{y1}, cols {x0}..{x1}"
    );
    println!("wrote base_sr.png, pasted_sr.png, diff.png, stats.csv to {}", args.out_dir.display());
    Ok(0)
}

pub fn run(cmd: &DiagnoseCmd) -> Result<i32> {
    match cmd {
        DiagnoseCmd::Stats(args) => match load_any(&args.model)? {
            AnyModel::F32(m) => stats(&m, args),
            AnyModel::F64(m) => stats(&m, args),
        },
        DiagnoseCmd::Paste(args) => match load_any(&args.model)? {
            AnyModel::F32(m) => paste(&m, args),
            AnyModel::F64(m) => paste(&m, args),
        },
    }
}
