use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use sparsegen::evaluate::{average_precision, coco_thresholds, label_quality, ApReport, QualityReport};
use sparsegen::ingest::read_coco_annotations;
use sparsegen::LabelSet;

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Labels to score (COCO annotation JSON, e.g. `refine` output).
    #[arg(long)]
    pub labels: PathBuf,
    /// Ground truth (COCO annotation JSON with instance ids).
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Precision/recall curves as CSV; defaults to the report path with a `.csv` extension.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub labels: usize,
    pub ground_truth: usize,
    pub quality: QualityReport,
    pub ap: ApReport,
}

pub fn evaluate(labels: &LabelSet, gt: &LabelSet) -> EvalReport {
    EvalReport {
        labels: labels.len(),
        ground_truth: gt.len(),
        quality: label_quality(labels, gt),
        ap: average_precision(labels, gt, &coco_thresholds()),
    }
}

fn read_labels(path: &Path) -> Result<sparsegen::ingest::CocoAnnotations> {
    read_coco_annotations(path).with_context(|| format!("reading {}", path.display()))
}

pub fn run(args: &EvalArgs) -> Result<ExitCode> {
    let labels = read_labels(&args.labels)?;
    let gt = read_labels(&args.gt)?;

    let known: BTreeSet<u64> = gt.images.iter().map(|i| i.image_id).collect();
    let unknown: Vec<u64> = labels
        .labels
        .image_ids()
        .chain(labels.images.iter().map(|i| i.image_id))
        .filter(|id| !known.contains(id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        bail!(
            "{} refers to image ids absent from {}: {:?}",
            args.labels.display(),
            args.gt.display(),
            unknown
        );
    }

    let report = evaluate(&labels.labels, &gt.labels);
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;

    let curves = args.curves.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let file = fs::File::create(&curves).with_context(|| format!("creating {}", curves.display()))?;
    write_curves(file, &report.ap)?;

    let q = &report.quality.overall;
    log::info!(
        "{} pairs: mean IoU {:.4}, IoU>=0.5 {:.4}, IoU>=0.75 {:.4}; AP50 {:.4}, AP50:95 {:.4}",
        q.pairs,
        q.mean_iou,
        q.frac_iou_50,
        q.frac_iou_75,
        report.ap.per_threshold.first().copied().unwrap_or(0.0),
        report.ap.mean
    );
    Ok(ExitCode::SUCCESS)
}

/// `category_id,threshold,precision,recall`, one row per curve point.
pub fn write_curves(w: impl io::Write, ap: &ApReport) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["category_id", "threshold", "precision", "recall"])?;
    for c in &ap.curves {
        for p in &c.points {
            csv.write_record([
                c.category_id.to_string(),
                format!("{:.2}", c.threshold),
                p.precision.to_string(),
                p.recall.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
