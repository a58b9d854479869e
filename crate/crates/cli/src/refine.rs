use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use sparsegen::ingest::write_labels;
use sparsegen::matching::Intercept;
use sparsegen::pipeline::RefineOutput;
use sparsegen::{refine_bundle, ExtentMode, LabelSource, MatchMode, RefineOptions};

use crate::{grids, params_or_default, InputArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtentArg {
    /// Tail-trimmed masked marginals.
    Pbl,
    /// Largest dense box assigned to the instance.
    BiggestBox,
    /// Highest-scoring dense box assigned to the instance.
    TopScore,
}

impl From<ExtentArg> for ExtentMode {
    fn from(a: ExtentArg) -> Self {
        match a {
            ExtentArg::Pbl => ExtentMode::Pbl,
            ExtentArg::BiggestBox => ExtentMode::BiggestBox,
            ExtentArg::TopScore => ExtentMode::TopScore,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterceptArg {
    /// Line through both group means.
    Anchored,
    /// Same slope, starting from the lower group's mean.
    Printed,
}

impl From<InterceptArg> for Intercept {
    fn from(a: InterceptArg) -> Self {
        match a {
            InterceptArg::Anchored => Intercept::Anchored,
            InterceptArg::Printed => Intercept::Printed,
        }
    }
}

/// Options shared by `refine` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Parameter profile (`R = ..`, `w3 = ..`, `s = ..`); defaults when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Box synthesis for points no dense box landed on.
    #[arg(long, default_value_t = MatchMode::Padm)]
    pub match_mode: MatchMode,
    /// Replace tail trimming by the biggest assigned box.
    #[arg(long, conflicts_with = "extent")]
    pub no_pbl: bool,
    #[arg(long, value_enum)]
    pub extent: Option<ExtentArg>,
    #[arg(long, value_enum, default_value_t = InterceptArg::Anchored)]
    pub intercept: InterceptArg,
}

impl PipelineArgs {
    pub fn options(&self) -> Result<RefineOptions> {
        let mut opts = RefineOptions::new(params_or_default(self.params.as_deref())?);
        opts.match_mode = self.match_mode;
        opts.extent = match (self.no_pbl, self.extent) {
            (true, _) => ExtentMode::BiggestBox,
            (false, Some(e)) => e.into(),
            (false, None) => ExtentMode::Pbl,
        };
        opts.intercept = self.intercept.into();
        Ok(opts)
    }
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Refined labels, COCO annotation JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-category heat grids (ST) and masked grids (AMT) as PGM files.
    #[arg(long)]
    pub dump_grids: Option<PathBuf>,
}

pub fn run(args: &RefineArgs) -> Result<ExitCode> {
    let bundle = args.input.load(None)?;
    let mut opts = args.pipeline.options()?;
    opts.keep_grids = args.dump_grids.is_some();

    let out = refine_bundle(&bundle, &opts)?;
    write_labels(&out.labels, &bundle.images, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(dir) = &args.dump_grids {
        grids::dump_all(dir, &out.results)?;
    }
    report(&out);
    Ok(exit_code(&out))
}

pub(crate) fn exit_code(out: &RefineOutput) -> ExitCode {
    if out.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn report(out: &RefineOutput) {
    let mut by_source: BTreeMap<&'static str, usize> = BTreeMap::new();
    for r in &out.results {
        for o in &r.outcomes {
            let name = match o.source {
                LabelSource::Pbl => "pbl",
                LabelSource::BiggestBox => "biggest_box",
                LabelSource::TopScore => "top_score",
                LabelSource::Padm => "padm",
                LabelSource::Apl => "apl",
            };
            *by_source.entry(name).or_default() += 1;
        }
    }
    let summary: Vec<String> = by_source.iter().map(|(k, v)| format!("{k}={v}")).collect();
    log::info!(
        "refined {} labels on {} images ({})",
        out.labels.len(),
        out.results.len(),
        summary.join(", ")
    );
    if !out.failures.is_empty() {
        for (image_id, why) in &out.failures {
            log::error!("image {image_id} skipped: {why}");
        }
        log::error!("{} image(s) failed", out.failures.len());
    }
}
