//! `repsr train`: fit a multi-branch model and write weights + a CSV log.
//!
//! Every knob resolves in the same order: command-line flag, then config
//! file (`--config`, flat `key=value` lines keyed by the flag name), then
//! built-in default. The effective configuration is echoed as `# key=value`
//! comments at the top of the log, so a run can be reproduced from its log
//! alone.

use crate::cmd::{arg_err, build_spec, parse_bn_placement, parse_residual};
use crate::config::{pick, ConfigFile};
use clap::Args;
use repsr::block::{BnPlacement, ResidualKind};
use repsr::model::{build_model, ModelSpec};
use repsr::train::{train_loop, Dataset, Schedule, TrainConfig};
use repsr::weights::{save_model_with_provenance, TrainProvenance};
use repsr::{Prng, Result, Scalar};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;

/// Payload scalar type for the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse()
}

/// Which learning-rate schedule family to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Multistep,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "multistep" => Ok(ScheduleKind::Multistep),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(format!(
                "unknown schedule `{other}` (expected multistep or cosine)"
            )),
        }
    }
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleKind, String> {
    s.parse()
}

/// Comma-separated iteration indices, e.g. `500,750`.
#[derive(Debug, Clone)]
pub struct Milestones(pub Vec<usize>);

impl FromStr for Milestones {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("milestone `{p}` is not an integer"))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Milestones)
    }
}

fn parse_milestones(s: &str) -> std::result::Result<Milestones, String> {
    s.parse()
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat key=value config file; any flag below overrides its entry.
    #[arg(long)]
    config: Option<PathBuf>,

    // -- architecture -------------------------------------------------------
    /// Size notation M<blocks>C<channels>x<scale> [default: M4C16x2].
    #[arg(long)]
    model: Option<String>,
    /// Image channels: 1 (grayscale) or 3 (RGB) [default: 1].
    #[arg(long)]
    colors: Option<usize>,
    /// Expand-squeeze branches per block [default: 2].
    #[arg(long)]
    branches: Option<usize>,
    /// Branch interior width as a multiple of the block channels [default: 2].
    #[arg(long)]
    width_multiplier: Option<usize>,
    /// Shortcut flavor: clean, with-bn, or none [default: clean].
    #[arg(long, value_parser = parse_residual)]
    residual: Option<ResidualKind>,
    /// Norm placement in a branch: mid or after-each [default: mid].
    #[arg(long, value_parser = parse_bn_placement)]
    bn_placement: Option<BnPlacement>,
    /// Scalar type: f32 or f64 [default: f32].
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,

    // -- run length and optimizer -------------------------------------------
    /// Training iterations [default: 1000].
    #[arg(long)]
    iters: Option<usize>,
    /// Patches per batch [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Low-resolution patch side in pixels [default: 48].
    #[arg(long)]
    patch_size: Option<usize>,
    /// Initial learning rate [default: 4e-4].
    #[arg(long)]
    lr0: Option<f64>,
    /// Schedule family: multistep or cosine [default: multistep].
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<ScheduleKind>,
    /// Multistep decay points, comma-separated [default: iters/2,3*iters/4].
    #[arg(long, value_parser = parse_milestones)]
    milestones: Option<Milestones>,
    /// Multistep decay factor [default: 0.5].
    #[arg(long)]
    gamma: Option<f64>,
    /// Cosine restart cycles [default: 1].
    #[arg(long)]
    cycles: Option<usize>,
    /// Cosine floor learning rate [default: 0].
    #[arg(long)]
    lr_min: Option<f64>,
    /// Fraction of the run with live batch statistics at the END; the freeze
    /// fires at round((1 - fraction) * iters) [default: 0.1].
    #[arg(long)]
    freeze_fraction: Option<f64>,
    /// Seed for initialization, data synthesis, and patch sampling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Log every this many iterations [default: 100].
    #[arg(long)]
    log_every: Option<usize>,

    // -- data ----------------------------------------------------------------
    /// Directory of training PNGs; omitted = synthetic images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of validation PNGs; omitted = a held-out tenth of the
    /// training images (or the training set itself when it cannot be split).
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Synthetic images to generate when --data is omitted [default: 8].
    #[arg(long)]
    synthetic_count: Option<usize>,
    /// Side length of synthetic images [default: fits the patch size].
    #[arg(long)]
    synthetic_size: Option<usize>,

    // -- outputs -------------------------------------------------------------
    /// Where to write the trained weights (required here or in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the CSV log [default: the weights path with .csv].
    #[arg(long)]
    log: Option<PathBuf>,
}

/// Config keys = long flag names, minus `--config` itself.
const KNOWN_KEYS: &[&str] = &[
    "model",
    "colors",
    "branches",
    "width-multiplier",
    "residual",
    "bn-placement",
    "precision",
    "iters",
    "batch-size",
    "patch-size",
    "lr0",
    "schedule",
    "milestones",
    "gamma",
    "cycles",
    "lr-min",
    "freeze-fraction",
    "seed",
    "log-every",
    "data",
    "val-data",
    "synthetic-count",
    "synthetic-size",
    "out",
    "log",
];

/// Everything `run` resolves before dispatching on precision.
struct Resolved {
    spec: ModelSpec,
    tc: TrainConfig,
    precision: Precision,
    data: Option<PathBuf>,
    val_data: Option<PathBuf>,
    synthetic_count: usize,
    synthetic_size: usize,
    out: PathBuf,
    log: PathBuf,
}

fn resolve(args: &TrainArgs) -> Result<Resolved> {
    let cfg = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::empty(),
    };
    cfg.check_keys(KNOWN_KEYS)?;

    let notation =
        pick(args.model.clone(), &cfg, "model")?.unwrap_or_else(|| "M4C16x2".to_string());
    let colors = pick(args.colors, &cfg, "colors")?.unwrap_or(1);
    let branches = pick(args.branches, &cfg, "branches")?.unwrap_or(2);
    let width_multiplier = pick(args.width_multiplier, &cfg, "width-multiplier")?.unwrap_or(2);
    let residual = pick(args.residual, &cfg, "residual")?.unwrap_or(ResidualKind::Clean);
    let bn_placement =
        pick(args.bn_placement, &cfg, "bn-placement")?.unwrap_or(BnPlacement::MidOnly);
    let precision = pick(args.precision, &cfg, "precision")?.unwrap_or(Precision::F32);
    let spec = build_spec(
        &notation,
        colors,
        branches,
        width_multiplier,
        residual,
        bn_placement,
    )?;

    let iters = pick(args.iters, &cfg, "iters")?.unwrap_or(1000);
    let mut tc = TrainConfig::new(iters);
    if let Some(v) = pick(args.batch_size, &cfg, "batch-size")? {
        tc.batch_size = v;
    }
    if let Some(v) = pick(args.patch_size, &cfg, "patch-size")? {
        tc.patch_size = v;
    }
    if let Some(v) = pick(args.lr0, &cfg, "lr0")? {
        tc.lr0 = v;
    }
    if let Some(v) = pick(args.freeze_fraction, &cfg, "freeze-fraction")? {
        tc.freeze_fraction = v;
    }
    if let Some(v) = pick(args.seed, &cfg, "seed")? {
        tc.seed = v;
    }
    if let Some(v) = pick(args.log_every, &cfg, "log-every")? {
        tc.log_every = v;
    }

    let kind = pick(args.schedule, &cfg, "schedule")?.unwrap_or(ScheduleKind::Multistep);
    let milestones = pick(args.milestones.clone(), &cfg, "milestones")?;
    let gamma = pick(args.gamma, &cfg, "gamma")?;
    let cycles = pick(args.cycles, &cfg, "cycles")?;
    let lr_min = pick(args.lr_min, &cfg, "lr-min")?;
    tc.schedule = match kind {
        ScheduleKind::Multistep => Schedule::MultiStep {
            milestones: milestones
                .map(|m| m.0)
                .unwrap_or_else(|| vec![iters / 2, iters * 3 / 4]),
            gamma: gamma.unwrap_or(0.5),
        },
        ScheduleKind::Cosine => Schedule::CosineRestarts {
            cycles: cycles.unwrap_or(1),
            lr_min: lr_min.unwrap_or(0.0),
        },
    };
    tc.validate()?;

    let data = pick(args.data.clone(), &cfg, "data")?;
    let val_data = pick(args.val_data.clone(), &cfg, "val-data")?;
    let synthetic_count = pick(args.synthetic_count, &cfg, "synthetic-count")?.unwrap_or(8);
    // Synthetic images must at least fit one high-resolution patch.
    let min_side = (tc.patch_size * spec.scale).max(96);
    let synthetic_size = pick(args.synthetic_size, &cfg, "synthetic-size")?.unwrap_or(min_side);

    let out = pick(args.out.clone(), &cfg, "out")?
        .ok_or_else(|| arg_err("train", "missing --out (or `out=` in the config file)"))?;
    let log = pick(args.log.clone(), &cfg, "log")?.unwrap_or_else(|| out.with_extension("csv"));

    Ok(Resolved {
        spec,
        tc,
        precision,
        data,
        val_data,
        synthetic_count,
        synthetic_size,
        out,
        log,
    })
}

/// Build the (train, validation) datasets and a one-line description of
/// where they came from.
fn datasets<T: Scalar>(
    r: &Resolved,
    data_rng: &mut Prng,
) -> Result<(Dataset<T>, Dataset<T>, String)> {
    let colors = r.spec.colors;
    let (train, desc) = match &r.data {
        Some(dir) => (
            Dataset::from_dir(dir, colors)?,
            format!("dir:{}", dir.display()),
        ),
        None => (
            Dataset::synthetic(
                r.synthetic_count,
                r.synthetic_size,
                r.synthetic_size,
                colors,
                data_rng,
            )?,
            format!("synthetic:{}x{}^2", r.synthetic_count, r.synthetic_size),
        ),
    };
    if let Some(dir) = &r.val_data {
        let val = Dataset::from_dir(dir, colors)?;
        return Ok((train, val, format!("{desc} val=dir:{}", dir.display())));
    }
    // Hold out a tenth (at least one image); tiny sets validate on
    // themselves rather than giving up.
    if train.len() >= 2 {
        let count = (train.len() / 10).max(1);
        let (train, val) = train.split_validation(count)?;
        Ok((train, val, format!("{desc} val=heldout:{count}")))
    } else {
        let val = train.clone();
        Ok((train, val, format!("{desc} val=train")))
    }
}

fn go<T: Scalar>(r: &Resolved) -> Result<i32> {
    let mut root = Prng::new(r.tc.seed);
    let mut init_rng = root.split();
    let mut data_rng = root.split();

    let (train_ds, val_ds, data_desc) = datasets::<T>(r, &mut data_rng)?;
    let mut model = build_model::<T>(&r.spec, &mut init_rng)?;

    let mut log = BufWriter::new(File::create(&r.log)?);
    writeln!(log, "# command=train")?;
    writeln!(log, "# precision={}", r.precision)?;
    writeln!(
        log,
        "# branches={} width_multiplier={} residual={:?} bn_placement={:?}",
        r.spec.block.num_branches,
        r.spec.block.width_multiplier,
        r.spec.block.residual,
        r.spec.block.bn_placement
    )?;
    writeln!(log, "# data={data_desc}")?;
    writeln!(log, "# out={}", r.out.display())?;
    let outcome = train_loop(&mut model, &train_ds, &val_ds, &r.tc, Some(&mut log))?;
    log.flush()?;

    save_model_with_provenance(
        &model,
        TrainProvenance {
            seed: r.tc.seed,
            total_iters: r.tc.total_iters as u64,
            freeze_iter: outcome.freeze_iter as u64,
        },
        &r.out,
    )?;

    println!(
        "trained {} (colors={}, {} params) for {} iterations on {data_desc}",
        r.spec.notation(),
        r.spec.colors,
        model.param_count(),
        r.tc.total_iters
    );
    match outcome.froze_at {
        Some(at) => println!("froze batch statistics at iteration {at}"),
        None => println!("batch statistics were already latched before the freeze point"),
    }
    if let Some(row) = outcome.rows.last() {
        println!(
            "last log row: iter={} loss={:.6} psnr_val={:.3} dB",
            row.iter, row.loss, row.psnr_val
        );
    }
    println!(
        "wrote weights to {} and log to {}",
        r.out.display(),
        r.log.display()
    );
    Ok(0)
}

pub fn run(args: &TrainArgs) -> Result<i32> {
    let resolved = resolve(args)?;
    match resolved.precision {
        Precision::F32 => go::<f32>(&resolved),
        Precision::F64 => go::<f64>(&resolved),
    }
}
