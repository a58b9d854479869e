//! Deterministic synthetic scenes standing in for detector output.
//!
//! Ground-truth boxes are pairwise disjoint with sizes following a
//! linear-in-y field; each instance receives a
//! random number of jittered dense boxes (or none, at the miss rate) and one
//! point displaced from its center. Every random draw comes from a ChaCha
//! stream keyed by `(seed, image, purpose)`, so changing e.g. the point
//! jitter leaves the boxes untouched.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    BoxLabel, CategoryId, ImageId, ImageRecord, InstanceId, Label, LabelSet, PointAnnotation,
};
use crate::error::{Error, Result};
use crate::evaluate::iou;
use crate::ingest::{DatasetBundle, DenseBoxes, PointSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Instances per image, 1..=600.
    pub instances: usize,
    /// Mean box side at `y = 0`.
    pub base_size: f64,
    /// Growth of the mean box side per pixel of center y.
    pub size_gradient: f64,
    /// Width/height ratio range, sampled log-uniformly.
    pub aspect_range: (f64, f64),
    /// Minimum empty margin between ground-truth boxes, as a fraction of the
    /// larger mean side of the pair.
    pub min_gap: f64,
    /// Inclusive range of dense boxes per served instance.
    pub boxes_per_instance: (usize, usize),
    /// Std of the dense-box center offset as a fraction of the instance side.
    pub center_jitter: f64,
    /// Multiplicative side range for dense boxes, sampled log-uniformly per axis.
    pub scale_jitter: (f64, f64),
    /// Fraction of instances that get no dense box.
    pub miss_rate: f64,
    /// Point offset from the center as a fraction of the instance side.
    pub point_jitter: f64,
    pub categories: usize,
    /// Fraction of images whose ground truth goes into the supervised subset.
    pub supervised_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 4,
            image_width: 640,
            image_height: 640,
            instances: 20,
            base_size: 48.0,
            size_gradient: 0.08,
            aspect_range: (1.0, 1.0),
            min_gap: 0.0,
            boxes_per_instance: (3, 6),
            center_jitter: 0.0,
            scale_jitter: (1.0, 1.0),
            miss_rate: 0.0,
            point_jitter: 0.0,
            categories: 1,
            supervised_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, value: f64, reason: &'static str| {
            Err(Error::InvalidParam { name, value, reason })
        };
        if self.images == 0 {
            return bad("images", 0.0, "need at least one image");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size", 0.0, "must be positive");
        }
        if !(1..=600).contains(&self.instances) {
            return bad("instances", self.instances as f64, "must lie in 1..=600");
        }
        if !(self.base_size > 0.0) {
            return bad("base_size", self.base_size, "must be positive");
        }
        if !(self.base_size + self.size_gradient * self.image_height as f64 > 0.0) {
            return bad("size_gradient", self.size_gradient, "sizes must stay positive");
        }
        let (a0, a1) = self.aspect_range;
        if !(a0 > 0.0 && a1 >= a0) {
            return bad("aspect_range", a0, "need 0 < lo <= hi");
        }
        if !(self.min_gap >= 0.0) {
            return bad("min_gap", self.min_gap, "must be >= 0");
        }
        let (k0, k1) = self.boxes_per_instance;
        if k0 == 0 || k1 < k0 {
            return bad("boxes_per_instance", k0 as f64, "need 1 <= lo <= hi");
        }
        if !(self.center_jitter >= 0.0) {
            return bad("center_jitter", self.center_jitter, "must be >= 0");
        }
        let (s0, s1) = self.scale_jitter;
        if !(s0 > 0.0 && s1 >= s0) {
            return bad("scale_jitter", s0, "need 0 < lo <= hi");
        }
        if !(0.0..1.0).contains(&self.miss_rate) {
            return bad("miss_rate", self.miss_rate, "must lie in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.point_jitter) {
            return bad("point_jitter", self.point_jitter, "must lie in [0, 0.5)");
        }
        if self.categories == 0 {
            return bad("categories", 0.0, "need at least one category");
        }
        if !(0.0..=1.0).contains(&self.supervised_fraction) {
            return bad("supervised_fraction", self.supervised_fraction, "must lie in [0, 1]");
        }
        Ok(())
    }

    fn mean_side_at(&self, y: f64) -> f64 {
        self.base_size + self.size_gradient * y
    }
}

/// A generated dataset plus the references every metric needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    /// Inputs as the pipeline sees them; `gt` covers the supervised images only.
    pub bundle: DatasetBundle,
    /// Ground truth for every instance.
    pub truth: LabelSet,
    /// Instances that received no dense box.
    pub missed: BTreeSet<(ImageId, InstanceId)>,
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_BOXES: u64 = 2;
const STREAM_POINTS: u64 = 3;
const STREAM_SUBSET: u64 = 4;

fn rng_for(seed: u64, image_id: ImageId, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ image_id.rotate_left(32));
    rng.set_stream(stream);
    rng
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    } else {
        lo
    }
}

pub fn category_table(n: usize) -> BTreeMap<CategoryId, String> {
    (1..=n as CategoryId).map(|c| (c, format!("object_{c}"))).collect()
}

/// Instance ids are `image_id * 10_000 + k` for the k-th instance (1-based).
pub fn instance_id(image_id: ImageId, k: usize) -> InstanceId {
    image_id * 10_000 + k as InstanceId
}

struct ImageScene {
    img: ImageRecord,
    truth: Vec<Label>,
    points: Vec<PointAnnotation>,
    dense: BTreeMap<CategoryId, Vec<BoxLabel>>,
    missed: Vec<InstanceId>,
}

/// Generates a scene; a pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let scenes: Vec<ImageScene> = (1..=cfg.images as ImageId)
        .into_par_iter()
        .map(|image_id| generate_image(cfg, image_id))
        .collect::<Result<_>>()?;

    let categories = category_table(cfg.categories);
    let mut truth = LabelSet::new(categories.clone());
    let mut points = PointSet::new();
    let mut dense = DenseBoxes::new();
    let mut missed = BTreeSet::new();
    let mut images = Vec::with_capacity(scenes.len());
    for sc in scenes {
        let id = sc.img.image_id;
        images.push(sc.img);
        truth.touch(id);
        for l in sc.truth {
            truth.push(id, l)?;
        }
        points.insert(id, sc.points);
        for (cat, boxes) in sc.dense {
            if !boxes.is_empty() {
                dense.insert((id, cat), boxes);
            }
        }
        missed.extend(sc.missed.into_iter().map(|i| (id, i)));
    }
    truth.sort_canonical();

    let supervised = supervised_subset(cfg);
    let mut gt = truth.clone();
    gt.retain_images(|id| supervised.contains(&id));

    Ok(SynthScene {
        bundle: DatasetBundle {
            images,
            gt,
            points,
            dense,
        },
        truth,
        missed,
    })
}

/// `ceil(fraction * images)` image ids drawn without replacement.
fn supervised_subset(cfg: &SynthConfig) -> BTreeSet<ImageId> {
    let k = (cfg.supervised_fraction * cfg.images as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut ids: Vec<ImageId> = (1..=cfg.images as ImageId).collect();
    let mut rng = rng_for(cfg.seed, 0, STREAM_SUBSET);
    // Partial Fisher-Yates.
    for i in 0..k.min(ids.len()) {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.into_iter().take(k).collect()
}

fn generate_image(cfg: &SynthConfig, image_id: ImageId) -> Result<ImageScene> {
    let img = ImageRecord::new(image_id, cfg.image_width, cfg.image_height)?;
    let (w_img, h_img) = (img.width as f64, img.height as f64);

    let mut layout = rng_for(cfg.seed, image_id, STREAM_LAYOUT);
    let mut gt: Vec<BoxLabel> = Vec::with_capacity(cfg.instances);
    let max_tries = 2000 * cfg.instances;
    let mut tries = 0;
    while gt.len() < cfg.instances {
        tries += 1;
        if tries > max_tries {
            return Err(Error::Placement {
                placed: gt.len(),
                requested: cfg.instances,
            });
        }
        let cy = layout.random_range(0.0..h_img);
        let side = cfg.mean_side_at(cy);
        let aspect = log_uniform(&mut layout, cfg.aspect_range);
        let (w, h) = (side * aspect.sqrt(), side / aspect.sqrt());
        let cx = layout.random_range(0.0..w_img);
        let cat = layout.random_range(1..=cfg.categories as CategoryId);
        if cx - w / 2.0 < 0.0 || cx + w / 2.0 > w_img || cy - h / 2.0 < 0.0 || cy + h / 2.0 > h_img {
            continue;
        }
        let b = BoxLabel::new(cx - w / 2.0, cy - h / 2.0, w, h, cat)?;
        let collides = gt.iter().any(|o| too_close(o, &b, cfg.min_gap));
        if !collides {
            gt.push(b);
        }
    }

    let mut boxes_rng = rng_for(cfg.seed, image_id, STREAM_BOXES);
    let mut points_rng = rng_for(cfg.seed, image_id, STREAM_POINTS);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut truth = Vec::with_capacity(gt.len());
    let mut points = Vec::with_capacity(gt.len());
    let mut dense: BTreeMap<CategoryId, Vec<BoxLabel>> = BTreeMap::new();
    let mut missed = Vec::new();

    for (k, g) in gt.iter().enumerate() {
        let id = instance_id(image_id, k + 1);
        truth.push(Label::new(*g).with_id(id));
        points.push(jittered_point(g, id, cfg.point_jitter, &img, &mut points_rng));

        let is_missed = boxes_rng.random::<f64>() < cfg.miss_rate;
        let count = boxes_rng.random_range(cfg.boxes_per_instance.0..=cfg.boxes_per_instance.1);
        if is_missed {
            missed.push(id);
            continue;
        }
        for _ in 0..count {
            let dx = unit.sample(&mut boxes_rng) * cfg.center_jitter * g.width();
            let dy = unit.sample(&mut boxes_rng) * cfg.center_jitter * g.height();
            let w = g.width() * log_uniform(&mut boxes_rng, cfg.scale_jitter);
            let h = g.height() * log_uniform(&mut boxes_rng, cfg.scale_jitter);
            let noise: f64 = boxes_rng.random();
            let x0 = g.x_min() + dx + (g.width() - w) / 2.0;
            let y0 = g.y_min() + dy + (g.height() - h) / 2.0;
            let Some(b) = BoxLabel::new(x0, y0, w, h, g.category_id())?
                .clamp_to(&img)
            else {
                continue;
            };
            // Detector confidence loosely tracks localization quality.
            let score = (0.4 + 0.3 * iou(&b, g) + 0.3 * noise).min(1.0);
            dense.entry(g.category_id()).or_default().push(b.with_score(score));
        }
    }
    for boxes in dense.values_mut() {
        boxes.sort_by(|a, b| {
            a.x_min()
                .total_cmp(&b.x_min())
                .then(a.y_min().total_cmp(&b.y_min()))
                .then(a.width().total_cmp(&b.width()))
                .then(a.height().total_cmp(&b.height()))
        });
    }

    Ok(ImageScene {
        img,
        truth,
        points,
        dense,
        missed,
    })
}

fn too_close(a: &BoxLabel, b: &BoxLabel, min_gap: f64) -> bool {
    let gap = min_gap * a.mean_side().max(b.mean_side());
    let dx = (a.x_min().max(b.x_min()) - a.x_max().min(b.x_max())).max(0.0);
    let dy = (a.y_min().max(b.y_min()) - a.y_max().min(b.y_max())).max(0.0);
    if gap == 0.0 {
        dx == 0.0 && dy == 0.0
    } else {
        dx.hypot(dy) < gap
    }
}

/// Point at `jitter * (w, h)` from the box center in a random direction, kept inside the image.
fn jittered_point(
    g: &BoxLabel,
    id: InstanceId,
    jitter: f64,
    img: &ImageRecord,
    rng: &mut impl Rng,
) -> PointAnnotation {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (cx, cy) = g.center();
    let x = cx + jitter * g.width() * theta.cos();
    let y = cy + jitter * g.height() * theta.sin();
    // Keeps the point inside the image even after two-decimal serialization.
    let inside = |v: f64, n: u32| v.clamp(0.0, (n as f64 - 0.01).max(0.0));
    PointAnnotation {
        x: inside(x, img.width),
        y: inside(y, img.height),
        category_id: g.category_id(),
        instance_id: id,
    }
}

/// Re-derives points from ground truth at a new jitter, drawing directions
/// from the same streams `generate` uses for that seed.
pub fn jitter_points(truth: &LabelSet, images: &[ImageRecord], jitter: f64, seed: u64) -> Result<PointSet> {
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::InvalidParam {
            name: "point_jitter",
            value: jitter,
            reason: "must lie in [0, 0.5)",
        });
    }
    let mut out = PointSet::new();
    for img in images {
        let mut labels: Vec<&Label> = truth.image(img.image_id).iter().collect();
        labels.sort_by_key(|l| l.id);
        let mut rng = rng_for(seed, img.image_id, STREAM_POINTS);
        let pts = labels
            .into_iter()
            .filter_map(|l| l.id.map(|id| jittered_point(&l.bbox, id, jitter, img, &mut rng)))
            .collect();
        out.insert(img.image_id, pts);
    }
    Ok(out)
}
