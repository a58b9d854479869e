//! Command-line surface for sparsegen: `synth`, `refine`, `fit`, `eval`, `sweep`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

pub mod eval;
pub mod fit;
pub mod grids;
pub mod refine;
pub mod sweep;
pub mod synth;

#[derive(Debug, Parser)]
#[command(name = "sparsegen", version, about = "Turn dense detector boxes and point annotations into one box per point")]
pub struct Cli {
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "SPARSEGEN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset in the ingest formats.
    Synth(synth::SynthArgs),
    /// Refine dense boxes into one label per point.
    Refine(refine::RefineArgs),
    /// Fit (R, w3, s) on the supervised images.
    Fit(fit::FitArgs),
    /// Score labels against ground truth.
    Eval(eval::EvalArgs),
    /// Re-run refine and eval across one parameter axis.
    Sweep(sweep::SweepArgs),
}

/// The three inputs every pipeline run needs.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// COCO document listing the images (annotations, if any, are ignored).
    #[arg(long)]
    pub images: PathBuf,
    /// Dense detections: a JSON array of {image_id, category_id, bbox, score}.
    #[arg(long)]
    pub detections: PathBuf,
    /// Point annotations: a JSON array of {image_id, category_id, instance_id, point}.
    #[arg(long)]
    pub points: PathBuf,
}

impl InputArgs {
    pub fn load(&self, gt: Option<&std::path::Path>) -> Result<sparsegen::DatasetBundle> {
        sparsegen::ingest::load_bundle(&self.images, gt, &self.points, &self.detections)
            .context("loading inputs")
    }
}

/// Runs the parsed command line; the exit code is 0 only if every image was processed.
pub fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Refine(a) => refine::run(&a),
        Command::Fit(a) => fit::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Sweep(a) => sweep::run(&a),
    }
}

pub(crate) fn params_or_default(path: Option<&std::path::Path>) -> Result<sparsegen::Params> {
    match path {
        Some(p) => sparsegen::ingest::read_params(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(sparsegen::Params::default()),
    }
}
