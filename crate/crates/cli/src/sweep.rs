use std::borrow::Cow;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use sparsegen::evaluate::{average_precision, coco_thresholds, label_quality};
use sparsegen::ingest::read_coco_annotations;
use sparsegen::optimize::log_spaced;
use sparsegen::synth::jitter_points;
use sparsegen::{refine_bundle, DatasetBundle, LabelSet, MatchMode, RefineOptions};

use crate::refine::PipelineArgs;
use crate::InputArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Tail-mass fraction R (other parameters from --params).
    #[value(name = "R", alias = "r")]
    R,
    /// Point offset as a fraction of box size; points are re-drawn from --truth.
    PointJitter,
    /// padm or apl.
    MatchMode,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Ground truth for every instance (COCO annotation JSON with instance ids).
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Axis values (comma separated). Defaults: the 15-value R grid,
    /// `0,0.2,0.4` for point jitter, `padm,apl` for match mode.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    /// Seed of the point-direction stream used when re-drawing points.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV: value,pairs,mean_iou,frac_iou_50,frac_iou_75,ap50,ap50_95.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub pairs: usize,
    pub mean_iou: f64,
    pub frac_iou_50: f64,
    pub frac_iou_75: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

fn default_values(axis: Axis) -> Vec<String> {
    match axis {
        Axis::R => log_spaced(0.01, 0.30, 15).iter().map(f64::to_string).collect(),
        Axis::PointJitter => ["0", "0.2", "0.4"].map(String::from).to_vec(),
        Axis::MatchMode => ["padm", "apl"].map(String::from).to_vec(),
    }
}

/// Runs refine + eval once per axis value. Also returns the number of failed images.
pub fn sweep(
    bundle: &DatasetBundle,
    truth: &LabelSet,
    base: &RefineOptions,
    axis: Axis,
    values: &[String],
    seed: u64,
) -> Result<(Vec<SweepRow>, usize)> {
    let mut rows = Vec::with_capacity(values.len());
    let mut failures = 0;
    for raw in values {
        let mut opts = *base;
        let mut data = Cow::Borrowed(bundle);
        match axis {
            Axis::R => {
                opts.params.r = raw.parse().with_context(|| format!("R value {raw:?}"))?;
            }
            Axis::PointJitter => {
                let j: f64 = raw.parse().with_context(|| format!("jitter value {raw:?}"))?;
                data.to_mut().points = jitter_points(truth, &bundle.images, j, seed)?;
            }
            Axis::MatchMode => {
                opts.match_mode = raw.parse::<MatchMode>().map_err(anyhow::Error::msg)?;
            }
        }
        let out = refine_bundle(&data, &opts)?;
        failures += out.failures.len();
        let q = label_quality(&out.labels, truth).overall;
        let ap = average_precision(&out.labels, truth, &coco_thresholds());
        rows.push(SweepRow {
            value: raw.clone(),
            pairs: q.pairs,
            mean_iou: q.mean_iou,
            frac_iou_50: q.frac_iou_50,
            frac_iou_75: q.frac_iou_75,
            ap50: ap.per_threshold.first().copied().unwrap_or(0.0),
            ap50_95: ap.mean,
        });
    }
    Ok((rows, failures))
}

pub fn write_rows(w: impl io::Write, rows: &[SweepRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["value", "pairs", "mean_iou", "frac_iou_50", "frac_iou_75", "ap50", "ap50_95"])?;
    for r in rows {
        csv.write_record([
            r.value.clone(),
            r.pairs.to_string(),
            r.mean_iou.to_string(),
            r.frac_iou_50.to_string(),
            r.frac_iou_75.to_string(),
            r.ap50.to_string(),
            r.ap50_95.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn run(args: &SweepArgs) -> Result<ExitCode> {
    let bundle = args.input.load(None)?;
    let truth = read_coco_annotations(&args.truth)
        .with_context(|| format!("reading {}", args.truth.display()))?
        .labels;
    let base = args.pipeline.options()?;
    let values = args.values.clone().unwrap_or_else(|| default_values(args.axis));

    let (rows, failures) = sweep(&bundle, &truth, &base, args.axis, &values, args.seed)?;
    let file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_rows(file, &rows)?;

    if let Some(best) = rows.iter().max_by(|a, b| a.mean_iou.total_cmp(&b.mean_iou)) {
        log::info!("best mean IoU {:.4} at {:?} = {}", best.mean_iou, args.axis, best.value);
    }
    if failures > 0 {
        log::error!("{failures} image run(s) failed across the sweep");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
