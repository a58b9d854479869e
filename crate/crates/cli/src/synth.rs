use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use sparsegen::ingest::{write_detections, write_labels, write_points};
use sparsegen::synth::{generate, SynthConfig};
use sparsegen::LabelSet;

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory; receives images.json, gt.json, truth.json,
    /// points.json, detections.json and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with SynthConfig fields; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    #[arg(long)]
    pub base_size: Option<f64>,
    #[arg(long)]
    pub size_gradient: Option<f64>,
    #[arg(long)]
    pub min_gap: Option<f64>,
    /// Dense boxes per instance as `MIN,MAX`.
    #[arg(long, value_parser = parse_usize_pair)]
    pub boxes: Option<(usize, usize)>,
    #[arg(long)]
    pub center_jitter: Option<f64>,
    /// Multiplicative size range as `LO,HI`.
    #[arg(long, value_parser = parse_f64_pair)]
    pub scale_jitter: Option<(f64, f64)>,
    #[arg(long)]
    pub miss_rate: Option<f64>,
    #[arg(long)]
    pub point_jitter: Option<f64>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub supervised_fraction: Option<f64>,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String>
where
    T::Err: std::fmt::Display,
{
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `A,B`, got {s:?}"))?;
    let a = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

fn parse_usize_pair(s: &str) -> Result<(usize, usize), String> {
    parse_pair(s)
}

fn parse_f64_pair(s: &str) -> Result<(f64, f64), String> {
    parse_pair(s)
}

impl SynthArgs {
    pub fn config(&self) -> Result<SynthConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => SynthConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(
            seed => seed,
            images => images,
            instances => instances,
            width => image_width,
            height => image_height,
            base_size => base_size,
            size_gradient => size_gradient,
            min_gap => min_gap,
            boxes => boxes_per_instance,
            center_jitter => center_jitter,
            scale_jitter => scale_jitter,
            miss_rate => miss_rate,
            point_jitter => point_jitter,
            categories => categories,
            supervised_fraction => supervised_fraction,
        );
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a SynthConfig,
    supervised_images: Vec<u64>,
    /// `[image_id, instance_id]` pairs that received no dense box.
    missed: Vec<[u64; 2]>,
}

pub fn run(args: &SynthArgs) -> Result<ExitCode> {
    let cfg = args.config()?;
    let scene = generate(&cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let images = &scene.bundle.images;
    let at = |name: &str| args.out.join(name);

    write_labels(&LabelSet::new(scene.truth.categories.clone()), images, at("images.json"))?;
    write_labels(&scene.bundle.gt, images, at("gt.json"))?;
    write_labels(&scene.truth, images, at("truth.json"))?;
    write_points(&scene.bundle.points, at("points.json"))?;
    write_detections(&scene.bundle.dense, at("detections.json"))?;

    let manifest = Manifest {
        config: &cfg,
        supervised_images: scene.bundle.supervised_images(),
        missed: scene.missed.iter().map(|&(i, k)| [i, k]).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(at("manifest.json"), text).context("writing manifest.json")?;

    let boxes: usize = scene.bundle.dense.values().map(Vec::len).sum();
    log::info!(
        "wrote {} images, {} instances, {} dense boxes, {} missed to {}",
        images.len(),
        scene.truth.len(),
        boxes,
        scene.missed.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
