//! `repsr` — train multi-branch super-resolution networks, collapse them to
//! plain convolution stacks, and poke at the result.
//!
//! One subcommand per capability:
//!
//! - `train`     fit a multi-branch model, freeze its batch-norm statistics
//!               late in the run, write weights + a CSV log
//! - `merge`     collapse training-form weights into plain-form weights
//! - `verify`    prove the two forms compute the same function
//! - `infer`     upscale a PNG
//! - `count`     parameter / multiply-accumulate accounting for both forms
//! - `diagnose`  batch-norm statistics traces and the patch-paste probe
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed `verify`),
//! 2 usage error.

mod cmd;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "repsr", version, about = "Multi-branch super-resolution: train, collapse, verify.")]
struct Cli {
    /// Worker threads for tensor math (default: all cores). `--threads 1`
    /// guarantees bit-identical results across runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a multi-branch model and write training-form weights plus a CSV log.
    Train(cmd::train::TrainArgs),
    /// Collapse training-form weights into plain-form weights.
    Merge(cmd::merge::MergeArgs),
    /// Check that a model and its collapsed form agree on random inputs.
    Verify(cmd::verify::VerifyArgs),
    /// Upscale a PNG with a trained model.
    Infer(cmd::infer::InferArgs),
    /// Print parameter and multiply-accumulate counts for both forms.
    Count(cmd::count::CountArgs),
    /// Inspect a model: statistics traces and locality probes.
    #[command(subcommand)]
    Diagnose(cmd::diagnose::DiagnoseCmd),
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            std::process::exit(2);
        }
        // The pool can only be installed once per process; a second install
        // attempt (e.g. under a test harness) keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match &cli.cmd {
        Cmd::Train(args) => cmd::train::run(args),
        Cmd::Merge(args) => cmd::merge::run(args),
        Cmd::Verify(args) => cmd::verify::run(args),
        Cmd::Infer(args) => cmd::infer::run(args),
        Cmd::Count(args) => cmd::count::run(args),
        Cmd::Diagnose(args) => cmd::diagnose::run(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
