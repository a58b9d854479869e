//! File formats: COCO annotations (read/write), COCO detection results,
//! point annotations and parameter profiles.
//!
//! Writers emit one JSON object per line, floats with exactly two decimals,
//! records in a fixed order, so identical inputs give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::datamodel::{
    canonical_order, BoxLabel, CategoryId, ImageId, ImageRecord, InstanceId, Label, LabelSet,
    LabelSource, Params, PointAnnotation,
};
use crate::error::{Error, Result};

pub type DenseBoxes = BTreeMap<(ImageId, CategoryId), Vec<BoxLabel>>;
pub type PointSet = BTreeMap<ImageId, Vec<PointAnnotation>>;

/// Everything the pipeline consumes for one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetBundle {
    pub images: Vec<ImageRecord>,
    /// Supervised subset; images without entries are unlabeled.
    pub gt: LabelSet,
    pub points: PointSet,
    pub dense: DenseBoxes,
}

impl DatasetBundle {
    pub fn image(&self, image_id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Images carrying at least one ground-truth label.
    pub fn supervised_images(&self) -> Vec<ImageId> {
        self.images
            .iter()
            .map(|i| i.image_id)
            .filter(|id| !self.gt.image(*id).is_empty())
            .collect()
    }

    pub fn categories(&self) -> BTreeSet<CategoryId> {
        let mut cats: BTreeSet<CategoryId> = self.gt.categories.keys().copied().collect();
        cats.extend(self.dense.keys().map(|(_, c)| *c));
        cats.extend(self.points.values().flatten().map(|p| p.category_id));
        cats
    }

    /// Checks that every record references a known image.
    pub fn validate(&self) -> Result<()> {
        let known: BTreeSet<ImageId> = self.images.iter().map(|i| i.image_id).collect();
        let refs = self
            .gt
            .image_ids()
            .chain(self.points.keys().copied())
            .chain(self.dense.keys().map(|(i, _)| *i));
        for id in refs {
            if !known.contains(&id) {
                return Err(Error::UnknownImage(id));
            }
        }
        Ok(())
    }
}

/// Recoverable problems found while reading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReadWarnings {
    /// Records dropped for a non-positive size or no overlap with the image.
    pub skipped: usize,
    /// Boxes trimmed to the image bounds.
    pub clamped: usize,
    /// Scores pulled back into `[0, 1]`.
    pub scores_clamped: usize,
}

impl ReadWarnings {
    pub fn is_clean(&self) -> bool {
        *self == ReadWarnings::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoAnnotations {
    pub images: Vec<ImageRecord>,
    pub labels: LabelSet,
    pub warnings: ReadWarnings,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: ImageId,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<InstanceId>,
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    source: Option<LabelSource>,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: CategoryId,
    name: String,
}

#[derive(Deserialize)]
struct Detection {
    image_id: ImageId,
    category_id: CategoryId,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Deserialize)]
struct PointRecord {
    image_id: ImageId,
    category_id: CategoryId,
    instance_id: InstanceId,
    point: [f64; 2],
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        field: e.path().to_string(),
        source: e.into_inner(),
    })
}

fn image_index(images: &[ImageRecord]) -> BTreeMap<ImageId, ImageRecord> {
    images.iter().map(|i| (i.image_id, *i)).collect()
}

/// Validates, clamps and counts a raw `[x, y, w, h]` box.
fn admit_box(
    bbox: [f64; 4],
    category_id: CategoryId,
    img: &ImageRecord,
    warnings: &mut ReadWarnings,
) -> Option<BoxLabel> {
    let [x, y, w, h] = bbox;
    let Ok(b) = BoxLabel::new(x, y, w, h, category_id) else {
        warnings.skipped += 1;
        return None;
    };
    match b.clamp_to(img) {
        Some(c) => {
            if c != b {
                warnings.clamped += 1;
            }
            Some(c)
        }
        None => {
            warnings.skipped += 1;
            None
        }
    }
}

/// Reads a COCO annotation file: images, boxes (clamped to the images) and categories.
pub fn read_coco_annotations(path: impl AsRef<Path>) -> Result<CocoAnnotations> {
    let path = path.as_ref();
    parse_coco_annotations(&read_text(path)?, path)
}

pub fn parse_coco_annotations(text: &str, path: &Path) -> Result<CocoAnnotations> {
    let file: CocoFile = parse_json(text, path)?;
    let mut images = Vec::with_capacity(file.images.len());
    for im in &file.images {
        images.push(ImageRecord::new(im.id, im.width, im.height)?);
    }
    images.sort_by_key(|i| i.image_id);
    let index = image_index(&images);

    let mut categories: BTreeMap<CategoryId, String> = file
        .categories
        .into_iter()
        .map(|c| (c.id, c.name))
        .collect();
    // Tolerate files without a category table.
    for a in &file.annotations {
        categories
            .entry(a.category_id)
            .or_insert_with(|| format!("category_{}", a.category_id));
    }

    let mut labels = LabelSet::new(categories);
    let mut warnings = ReadWarnings::default();
    for a in file.annotations {
        let img = index.get(&a.image_id).ok_or(Error::UnknownImage(a.image_id))?;
        let Some(mut b) = admit_box(a.bbox, a.category_id, img, &mut warnings) else {
            continue;
        };
        if let Some(score) = a.score {
            b = b.with_score(clamp_score(score, &mut warnings));
        }
        let mut label = Label::new(b);
        label.id = a.id;
        label.source = a.source;
        labels.push(a.image_id, label)?;
    }
    labels.sort_canonical();
    if !warnings.is_clean() {
        warn!("{}: {:?}", path.display(), warnings);
    }
    Ok(CocoAnnotations {
        images,
        labels,
        warnings,
    })
}

fn clamp_score(score: f64, warnings: &mut ReadWarnings) -> f64 {
    if (0.0..=1.0).contains(&score) {
        score
    } else {
        warnings.scores_clamped += 1;
        if score.is_nan() {
            0.0
        } else {
            score.clamp(0.0, 1.0)
        }
    }
}

/// Reads COCO detection results, grouped by `(image_id, category_id)`.
pub fn read_detections(
    path: impl AsRef<Path>,
    images: &[ImageRecord],
) -> Result<(DenseBoxes, ReadWarnings)> {
    let path = path.as_ref();
    parse_detections(&read_text(path)?, path, images)
}

pub fn parse_detections(
    text: &str,
    path: &Path,
    images: &[ImageRecord],
) -> Result<(DenseBoxes, ReadWarnings)> {
    let records: Vec<Detection> = parse_json(text, path)?;
    let index = image_index(images);
    let mut out = DenseBoxes::new();
    let mut warnings = ReadWarnings::default();
    for d in records {
        let img = index.get(&d.image_id).ok_or(Error::UnknownImage(d.image_id))?;
        let score = clamp_score(d.score, &mut warnings);
        if let Some(b) = admit_box(d.bbox, d.category_id, img, &mut warnings) {
            out.entry((d.image_id, d.category_id))
                .or_default()
                .push(b.with_score(score));
        }
    }
    for boxes in out.values_mut() {
        boxes.sort_by(|a, b| canonical_order(&Label::new(*a), &Label::new(*b)));
    }
    if !warnings.is_clean() {
        warn!("{}: {:?}", path.display(), warnings);
    }
    Ok((out, warnings))
}

/// Reads point annotations; rejects out-of-image points and repeated instance ids.
pub fn read_points(path: impl AsRef<Path>, images: &[ImageRecord]) -> Result<PointSet> {
    let path = path.as_ref();
    parse_points(&read_text(path)?, path, images)
}

pub fn parse_points(text: &str, path: &Path, images: &[ImageRecord]) -> Result<PointSet> {
    let records: Vec<PointRecord> = parse_json(text, path)?;
    let index = image_index(images);
    let mut out = PointSet::new();
    let mut seen: BTreeSet<(ImageId, InstanceId)> = BTreeSet::new();
    for r in records {
        let img = index.get(&r.image_id).ok_or(Error::UnknownImage(r.image_id))?;
        if !seen.insert((r.image_id, r.instance_id)) {
            return Err(Error::DuplicateInstance {
                image_id: r.image_id,
                instance_id: r.instance_id,
            });
        }
        let [x, y] = r.point;
        let p = PointAnnotation::new(x, y, r.category_id, r.instance_id, img)?;
        out.entry(r.image_id).or_default().push(p);
    }
    for pts in out.values_mut() {
        pts.sort_by_key(|p| p.instance_id);
    }
    Ok(out)
}

/// Reads images, supervised labels, points and detections into one bundle.
pub fn load_bundle(
    images_path: &Path,
    gt_path: Option<&Path>,
    points_path: &Path,
    detections_path: &Path,
) -> Result<DatasetBundle> {
    let base = read_coco_annotations(images_path)?;
    let images = base.images;
    let gt = match gt_path {
        Some(p) if p == images_path => base.labels,
        Some(p) => read_coco_annotations(p)?.labels,
        None => LabelSet::new(base.labels.categories.clone()),
    };
    let points = read_points(points_path, &images)?;
    let (dense, _) = read_detections(detections_path, &images)?;
    let bundle = DatasetBundle {
        images,
        gt,
        points,
        dense,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// `{:.2}` without a negative zero.
fn fmt2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn bbox_json(b: &BoxLabel) -> String {
    format!(
        "[{}, {}, {}, {}]",
        fmt2(b.x_min()),
        fmt2(b.y_min()),
        fmt2(b.width()),
        fmt2(b.height())
    )
}

fn join_lines(lines: &[String]) -> String {
    if lines.is_empty() {
        "[]".to_string()
    } else {
        format!("[\n{}\n  ]", lines.join(",\n"))
    }
}

/// Renders a label set as a COCO annotation document.
pub fn labels_to_json(labels: &LabelSet, images: &[ImageRecord]) -> String {
    let mut images: Vec<ImageRecord> = images.to_vec();
    images.sort_by_key(|i| i.image_id);
    let image_lines: Vec<String> = images
        .iter()
        .map(|i| {
            format!(
                "    {{\"id\": {}, \"width\": {}, \"height\": {}}}",
                i.image_id, i.width, i.height
            )
        })
        .collect();

    let mut sorted = labels.clone();
    sorted.sort_canonical();
    let ann_lines: Vec<String> = sorted
        .iter()
        .map(|(image_id, l)| {
            let mut line = String::from("    {");
            if let Some(id) = l.id {
                let _ = write!(line, "\"id\": {id}, ");
            }
            let _ = write!(
                line,
                "\"image_id\": {image_id}, \"category_id\": {}, \"bbox\": {}, \"area\": {}, \"iscrowd\": 0",
                l.bbox.category_id(),
                bbox_json(&l.bbox),
                fmt2(l.bbox.area())
            );
            if let Some(score) = l.bbox.score() {
                let _ = write!(line, ", \"score\": {}", fmt2(score));
            }
            if let Some(src) = l.source {
                let _ = write!(line, ", \"source\": {}", json_string(source_name(src)));
            }
            line.push('}');
            line
        })
        .collect();

    let cat_lines: Vec<String> = labels
        .categories
        .iter()
        .map(|(id, name)| format!("    {{\"id\": {id}, \"name\": {}}}", json_string(name)))
        .collect();

    format!(
        "{{\n  \"images\": {},\n  \"annotations\": {},\n  \"categories\": {}\n}}\n",
        join_lines(&image_lines),
        join_lines(&ann_lines),
        join_lines(&cat_lines)
    )
}

fn source_name(src: LabelSource) -> &'static str {
    match src {
        LabelSource::Pbl => "pbl",
        LabelSource::BiggestBox => "biggest_box",
        LabelSource::TopScore => "top_score",
        LabelSource::Padm => "padm",
        LabelSource::Apl => "apl",
    }
}

/// Writes a label set as COCO annotation JSON.
pub fn write_labels(labels: &LabelSet, images: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &labels_to_json(labels, images))
}

/// Renders dense boxes as a COCO detection-results array.
pub fn detections_to_json(dense: &DenseBoxes) -> String {
    let lines: Vec<String> = dense
        .iter()
        .flat_map(|((image_id, category_id), boxes)| {
            boxes.iter().map(move |b| {
                format!(
                    "  {{\"image_id\": {image_id}, \"category_id\": {category_id}, \"bbox\": {}, \"score\": {}}}",
                    bbox_json(b),
                    fmt2(b.score().unwrap_or(1.0))
                )
            })
        })
        .collect();
    if lines.is_empty() {
        "[]\n".to_string()
    } else {
        format!("[\n{}\n]\n", lines.join(",\n"))
    }
}

pub fn write_detections(dense: &DenseBoxes, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &detections_to_json(dense))
}

pub fn points_to_json(points: &PointSet) -> String {
    let lines: Vec<String> = points
        .iter()
        .flat_map(|(image_id, pts)| {
            pts.iter().map(move |p| {
                format!(
                    "  {{\"image_id\": {image_id}, \"category_id\": {}, \"instance_id\": {}, \"point\": [{}, {}]}}",
                    p.category_id,
                    p.instance_id,
                    fmt2(p.x),
                    fmt2(p.y)
                )
            })
        })
        .collect();
    if lines.is_empty() {
        "[]\n".to_string()
    } else {
        format!("[\n{}\n]\n", lines.join(",\n"))
    }
}

pub fn write_points(points: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &points_to_json(points))
}

/// Renders a parameter profile: one `key = value` line per parameter.
pub fn params_to_text(p: &Params) -> String {
    format!("# sparsegen parameters\nR = {}\nw3 = {}\ns = {}\n", p.r, p.w3, p.s)
}

pub fn write_params(p: &Params, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &params_to_text(p))
}

pub fn read_params(path: impl AsRef<Path>) -> Result<Params> {
    let path = path.as_ref();
    parse_params(&read_text(path)?, path)
}

/// Parses `key = value` lines (`R`, `w3`, `s`); `#` starts a comment.
pub fn parse_params(text: &str, path: &Path) -> Result<Params> {
    let fail = |line: usize, message: String| Error::ParamsFormat {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (mut r, mut w3, mut s) = (None, None, None);
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(line_no, format!("expected `key = value`, got {line:?}")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| fail(line_no, format!("bad number {:?}: {e}", value.trim())))?;
        let slot = match key.trim() {
            "R" | "r" => &mut r,
            "w3" => &mut w3,
            "s" => &mut s,
            other => return Err(fail(line_no, format!("unknown key {other:?}"))),
        };
        if slot.replace(value).is_some() {
            return Err(fail(line_no, format!("duplicate key {:?}", key.trim())));
        }
    }
    let missing = |name: &str| fail(0, format!("missing key {name:?}"));
    Params::new(
        r.ok_or_else(|| missing("R"))?,
        w3.ok_or_else(|| missing("w3"))?,
        s.ok_or_else(|| missing("s"))?,
    )
}
