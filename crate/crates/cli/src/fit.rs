use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use sparsegen::ingest::write_params;
use sparsegen::optimize::{fit_with, FitOptions, FitResult, Stage};
use sparsegen::{MatchMode, SearchSpace};

use crate::InputArgs;

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// COCO ground truth for the supervised images.
    #[arg(long)]
    pub gt: PathBuf,
    /// Fitted parameter profile.
    #[arg(long)]
    pub out: PathBuf,
    /// R values to search (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub r_grid: Option<Vec<f64>>,
    /// w3 values to search (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub w3_grid: Option<Vec<f64>>,
    /// s values to search (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub s_grid: Option<Vec<f64>>,
    /// Skip the half-step pass after the grid search.
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long, default_value_t = MatchMode::Padm)]
    pub match_mode: MatchMode,
}

impl FitArgs {
    pub fn space(&self) -> SearchSpace {
        let mut space = SearchSpace::default();
        if let Some(v) = &self.r_grid {
            space.r_grid = v.clone();
        }
        if let Some(v) = &self.w3_grid {
            space.w3_grid = v.clone();
        }
        if let Some(v) = &self.s_grid {
            space.s_grid = v.clone();
        }
        space
    }
}

pub fn run(args: &FitArgs) -> Result<ExitCode> {
    let bundle = args.input.load(Some(&args.gt))?;
    let opts = FitOptions {
        match_mode: args.match_mode,
        refine: !args.no_refine,
    };
    let result = fit_with(&bundle, &args.space(), &opts)?;
    write_params(&result.params, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    write_history(io::stdout().lock(), &result)?;
    log::info!(
        "fitted R = {}, w3 = {}, s = {} (loss {:.6}, {} evaluations)",
        result.params.r,
        result.params.w3,
        result.params.s,
        result.loss,
        result.history.len()
    );
    Ok(ExitCode::SUCCESS)
}

/// Loss table as CSV: `stage,R,w3,s,loss`, one row per evaluation in order.
pub fn write_history(w: impl io::Write, result: &FitResult) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["stage", "R", "w3", "s", "loss"])?;
    for rec in &result.history {
        let stage = match rec.stage {
            Stage::Grid => "grid",
            Stage::Refine => "refine",
        };
        csv.write_record([
            stage.to_string(),
            rec.params.r.to_string(),
            rec.params.w3.to_string(),
            rec.params.s.to_string(),
            rec.loss.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
